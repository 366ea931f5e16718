//! Release acceptance gate.
//!
//! Ten criteria, one test each, every test printing exactly one PASS or
//! FAIL line (visible under `cargo test --test acceptance -- --nocapture`;
//! cargo also shows the line whenever a criterion fails). A FAIL line is
//! always accompanied by a panic, so the gate can never look green in
//! cargo's own summary while a criterion is down.
//!
//! The first five criteria are the invariant law suites at their
//! release-gate instance counts. The remaining five exercise the shipped
//! binary and the experiment harness end to end: bitwise determinism,
//! the method ordering on the desk profile, new-client onboarding, the
//! global-vs-personalized gap, and metric definitions.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use dp2fl::config::{ExperimentConfig, Method};
use dp2fl::fixture::build_fixture;
use dp2fl::harness::{compare, new_client_experiment, run_method};
use dp2fl::metrics::classification_metrics;
use dp2fl::protocol::InitMode;
use dp2fl::seed;
use dp2fl::selftest::{
    check_blend_equivalence, check_gradients, check_normalization_laws, check_partition_laws,
    check_task_weight_laws, BLEND_INSTANCES, GRADIENT_INSTANCES, NORMALIZATION_INSTANCES,
    PARTITION_INSTANCES, TASK_WEIGHT_INSTANCES,
};
use dp2fl::surrogate::eval_metrics;

/// Runs one criterion, prints its single PASS/FAIL line, and panics on
/// any violation — including a blown wall-clock budget.
fn criterion(name: &str, budget: Duration, run: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let result = run();
    let elapsed = start.elapsed();
    let timing = format!(
        "{:.1}s of {:.0}s budget",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    match result {
        Ok(detail) if elapsed <= budget => {
            println!("PASS  {name}: {detail} [{timing}]");
        }
        Ok(detail) => {
            println!("FAIL  {name}: over budget; {detail} [{timing}]");
            panic!("{name} exceeded its runtime budget ({timing})");
        }
        Err(detail) => {
            println!("FAIL  {name}: {detail} [{timing}]");
            panic!("{name}: {detail}");
        }
    }
}

const POINT: f64 = 0.01; // one accuracy point, on metrics reported in [0, 1]

fn as_points(fraction: f64) -> f64 {
    fraction / POINT
}

#[test]
fn criterion_01_task_weight_laws() {
    criterion("task-weight laws", Duration::from_secs(10), || {
        check_task_weight_laws(TASK_WEIGHT_INSTANCES, None)
    });
}

#[test]
fn criterion_02_partition_laws() {
    criterion("client partition laws", Duration::from_secs(5), || {
        check_partition_laws(PARTITION_INSTANCES)
    });
}

#[test]
fn criterion_03_normalization_laws() {
    criterion("weight normalization laws", Duration::from_secs(5), || {
        check_normalization_laws(NORMALIZATION_INSTANCES)
    });
}

#[test]
fn criterion_04_blend_equivalence() {
    criterion("prompt blend equivalence", Duration::from_secs(5), || {
        check_blend_equivalence(BLEND_INSTANCES)
    });
}

#[test]
fn criterion_05_gradient_check() {
    criterion("analytic gradients", Duration::from_secs(60), || {
        check_gradients(GRADIENT_INSTANCES)
    });
}

/// Path of the checked-in desk configuration, relative to this crate.
fn desk_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

/// Runs the shipped binary's `run` subcommand into `out`, with an exact
/// thread-pool size when given, and returns (metrics.csv, summary.json).
fn run_cli(out: &Path, threads: Option<usize>) -> Result<(Vec<u8>, Vec<u8>), String> {
    let mut command = Command::new(env!("CARGO_BIN_EXE_dp2fl"));
    command
        .arg("run")
        .arg("--config")
        .arg(desk_config_path())
        .arg("--out")
        .arg(out)
        .arg("--seed")
        .arg("3")
        .env_remove("DP2FL_THREADS")
        .env_remove("DP2FL_SELFTEST_MUTATE");
    if let Some(threads) = threads {
        command.env("DP2FL_THREADS", threads.to_string());
    }
    let output = command
        .output()
        .map_err(|e| format!("failed to launch the binary: {e}"))?;
    if !output.status.success() {
        return Err(format!(
            "binary exited with {:?}: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stderr)
        ));
    }
    let read = |file: &str| -> Result<Vec<u8>, String> {
        std::fs::read(out.join(file)).map_err(|e| format!("missing {file}: {e}"))
    };
    Ok((read("metrics.csv")?, read("summary.json")?))
}

#[test]
fn criterion_06_bitwise_determinism() {
    criterion("bitwise determinism", Duration::from_secs(120), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let reference = run_cli(&dir.path().join("a"), None)?;
        let labels = ["identical rerun", "DP2FL_THREADS=1", "DP2FL_THREADS=4"];
        let variants = [
            run_cli(&dir.path().join("b"), None)?,
            run_cli(&dir.path().join("t1"), Some(1))?,
            run_cli(&dir.path().join("t4"), Some(4))?,
        ];
        for (label, variant) in labels.iter().zip(&variants) {
            if variant.0 != reference.0 {
                return Err(format!("metrics.csv differs under {label}"));
            }
            if variant.1 != reference.1 {
                return Err(format!("summary.json differs under {label}"));
            }
        }
        Ok(format!(
            "metrics.csv ({} bytes) and summary.json ({} bytes) byte-identical across {}",
            reference.0.len(),
            reference.1.len(),
            labels.join(", ")
        ))
    });
}

#[test]
fn criterion_07_method_ordering() {
    criterion(
        "method ordering on the desk profile",
        Duration::from_secs(300),
        || {
            let config = ExperimentConfig::desk_profile();
            let methods = [Method::Dp2fl, Method::Local, Method::FedavgPrompt];
            let seeds: Vec<u64> = (0..10).collect();
            let report = compare(&config, &methods, &seeds, None).map_err(|e| e.to_string())?;
            let mean = |method: Method| -> Result<f64, String> {
                report
                    .aggregate(method)
                    .map(|agg| agg.mean_acc)
                    .ok_or_else(|| format!("no aggregate for {method}"))
            };
            let dp2fl = mean(Method::Dp2fl)?;
            let local = mean(Method::Local)?;
            let fedavg = mean(Method::FedavgPrompt)?;
            if dp2fl < local + 1.0 * POINT {
                return Err(format!(
                    "dp2fl ({dp2fl:.4}) is not at least 1.0 points above local ({local:.4})"
                ));
            }
            if dp2fl < fedavg {
                return Err(format!(
                    "dp2fl ({dp2fl:.4}) trails fedavg_prompt ({fedavg:.4})"
                ));
            }
            Ok(format!(
                "mean accuracy dp2fl {dp2fl:.4} >= local {local:.4} + 1pt, >= fedavg {fedavg:.4} \
             (margins +{:.2} and +{:.2} points, 10 seeds)",
                as_points(dp2fl - local),
                as_points(dp2fl - fedavg)
            ))
        },
    );
}

#[test]
fn criterion_08_new_client_onboarding() {
    criterion("new-client onboarding", Duration::from_secs(180), || {
        // The join experiment keeps the desk federation but trains longer,
        // so the admitted model embodies a fully converged global prompt.
        let mut config = ExperimentConfig::desk_profile();
        config.rounds = 12;
        let join_round = config.rounds;

        let seeds = 10u64;
        let mut zero_shot = [0.0f64; 3]; // Global, Initglo, Init
        let mut global_training_gain = 0.0f64;
        for seed in 0..seeds {
            let mut seeded = config.clone();
            seeded.seed = seed;
            let report = new_client_experiment(&seeded, join_round, &InitMode::ALL)
                .map_err(|e| e.to_string())?;
            let mode = |wanted: InitMode| {
                report
                    .modes
                    .iter()
                    .find(|m| m.mode == wanted)
                    .ok_or_else(|| format!("mode {wanted:?} missing from the report"))
            };
            let global = mode(InitMode::Global)?;
            zero_shot[0] += global.zero_shot.accuracy;
            zero_shot[1] += mode(InitMode::Initglo)?.zero_shot.accuracy;
            zero_shot[2] += mode(InitMode::Init)?.zero_shot.accuracy;
            global_training_gain += global.after_round_new.accuracy - global.zero_shot.accuracy;
        }
        let [global, initglo, init] = zero_shot.map(|sum| sum / seeds as f64);
        global_training_gain /= seeds as f64;

        if !(global >= initglo && initglo >= init) {
            return Err(format!(
                "zero-shot ordering broken: global {global:.4}, initglo {initglo:.4}, init {init:.4}"
            ));
        }
        if global - init < 5.0 * POINT {
            return Err(format!(
                "global-vs-init gap {:.2} points is below 5",
                as_points(global - init)
            ));
        }
        if global_training_gain < 0.0 {
            return Err(format!(
                "one round of local training hurt the globally initialized newcomer \
                 by {:.2} points on average",
                as_points(-global_training_gain)
            ));
        }
        Ok(format!(
            "zero-shot global {global:.4} >= initglo {initglo:.4} >= init {init:.4}, \
             gap +{:.2} points; first-round gain +{:.2} points (10 seeds)",
            as_points(global - init),
            as_points(global_training_gain)
        ))
    });
}

#[test]
fn criterion_09_global_tracks_personalized() {
    criterion(
        "global model tracks personalized",
        Duration::from_secs(120),
        || {
            let mut config = ExperimentConfig::desk_profile();
            config.method = Method::Dp2fl;
            let seeds = 10u64;
            let mut global = 0.0f64;
            let mut personalized = 0.0f64;
            for seed in 0..seeds {
                let mut seeded = config.clone();
                seeded.seed = seed;
                let output = run_method(&seeded).map_err(|e| e.to_string())?;
                personalized += output.summary.final_personalized_mean.accuracy;
                global += output
                    .summary
                    .final_global_mean
                    .ok_or("dp2fl run produced no global model")?
                    .accuracy;
            }
            global /= seeds as f64;
            personalized /= seeds as f64;
            if global < personalized - 2.0 * POINT {
                return Err(format!(
                    "global {global:.4} is {:.2} points below personalized {personalized:.4}",
                    as_points(personalized - global)
                ));
            }
            Ok(format!(
                "global {global:.4} within 2 points of personalized {personalized:.4} \
             (gap {:+.2} points, 10 seeds)",
                as_points(global - personalized)
            ))
        },
    );
}

#[test]
fn criterion_10_metric_definitions() {
    criterion("metric definitions", Duration::from_secs(30), || {
        // Micro F1 must equal accuracy exactly — not approximately — on
        // every single-label evaluation, random or model-produced.
        let mut rng = seed::rng(seed::mix(0xacce_0001, 0));
        for case in 0..1000 {
            let classes = rng.random_range(2..=10usize);
            let len = rng.random_range(1..=50usize);
            let truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
            let predicted: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
            let metrics =
                classification_metrics(&truth, &predicted, classes).map_err(|e| e.to_string())?;
            if metrics.micro_f1 != metrics.accuracy {
                return Err(format!(
                    "case {case}: micro_f1 {} != accuracy {}",
                    metrics.micro_f1, metrics.accuracy
                ));
            }
        }

        let fixture =
            build_fixture(&ExperimentConfig::desk_profile()).map_err(|e| e.to_string())?;
        for dataset in &fixture.datasets {
            let metrics = eval_metrics(
                &fixture.backbone,
                &fixture.task_prompt,
                &fixture.data_prompt,
                dataset.test(),
            )
            .map_err(|e| e.to_string())?;
            if metrics.micro_f1 != metrics.accuracy {
                return Err(format!(
                    "client {}: model evaluation has micro_f1 {} != accuracy {}",
                    dataset.client_id(),
                    metrics.micro_f1,
                    metrics.accuracy
                ));
            }
        }

        // Fixed 10-sample case with a hand-tabulated confusion matrix:
        //            predicted 0  1  2
        //   truth 0          [ 2  1  1 ]   per-class F1: 0 -> 4/7
        //   truth 1          [ 1  2  0 ]                 1 -> 4/7
        //   truth 2          [ 0  1  2 ]                 2 -> 2/3
        let truth = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
        let predicted = [0, 0, 1, 2, 1, 1, 0, 2, 2, 1];
        let metrics = classification_metrics(&truth, &predicted, 3).map_err(|e| e.to_string())?;
        let expected_macro = (4.0 / 7.0 + 4.0 / 7.0 + 2.0 / 3.0) / 3.0;
        if (metrics.macro_f1 - expected_macro).abs() > 1e-12 {
            return Err(format!(
                "hand case: macro_f1 {} differs from tabulated {expected_macro}",
                metrics.macro_f1
            ));
        }
        if metrics.accuracy != 0.6 || metrics.micro_f1 != 0.6 {
            return Err(format!(
                "hand case: accuracy {} / micro_f1 {} differ from tabulated 0.6",
                metrics.accuracy, metrics.micro_f1
            ));
        }
        Ok(
            "micro F1 == accuracy on 1000 random and 5 model evaluations; \
            macro F1 matches the hand-tabulated case"
                .to_string(),
        )
    });
}
