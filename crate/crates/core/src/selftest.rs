//! The invariant self-test: every law the aggregation calculus and the
//! training core must obey, bundled as a pass/fail suite runnable from
//! the command line.
//!
//! Each check takes an instance count so callers can dial effort; the
//! command-line `selftest` uses the release-gate counts. Checks return a
//! short summary on success or a diagnostic describing the first violated
//! law.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::agg::{
    aggregate_data_prompt, classify_clients, global_task_weights, initial_local_weights,
    normalize_local_weights, AggregationParams, ClientPartition, GammaMode, LossMatrix,
    WeightVector,
};
use crate::config::{DimsConfig, ExperimentConfig};
use crate::harness::{metrics_csv, run_method};
use crate::seed;
use crate::surrogate::{
    build_backbone, eval_loss, init_prompts, loss_and_grad, Batch, Dims, TrainHyper,
};

/// Outcome type shared by all checks: human summary or first violation.
pub type Check = std::result::Result<String, String>;

/// Release-gate instance counts.
pub const TASK_WEIGHT_INSTANCES: usize = 1000;
pub const PARTITION_INSTANCES: usize = 1000;
pub const NORMALIZATION_INSTANCES: usize = 1000;
pub const BLEND_INSTANCES: usize = 1000;
pub const GRADIENT_INSTANCES: usize = 100;

/// One executed check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

/// The full suite's outcome.
#[derive(Clone, Debug)]
pub struct SelfTestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelfTestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|check| check.passed)
    }

    /// Renders the pass/fail table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            let verdict = if check.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "{verdict}  {:<28} {:>7} ms  {}\n",
                check.name, check.millis, check.detail
            ));
        }
        let verdict = if self.all_passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!("overall: {verdict}\n"));
        out
    }
}

/// A sabotage function rewriting a computed weight vector in place.
pub type WeightMutator = dyn Fn(&mut Vec<f64>) + Sync;

/// Optional sabotage points, used to prove the suite actually bites.
#[derive(Default)]
pub struct SelfTestHooks {
    /// Corrupts each computed global task-weight vector before the law
    /// checks see it; a correct implementation plus this hook must FAIL.
    pub corrupt_task_weights: Option<Box<WeightMutator>>,
}

fn timed(name: &'static str, run: impl FnOnce() -> Check) -> CheckOutcome {
    let start = Instant::now();
    let result = run();
    let millis = start.elapsed().as_millis();
    match result {
        Ok(detail) => CheckOutcome {
            name,
            passed: true,
            detail,
            millis,
        },
        Err(detail) => CheckOutcome {
            name,
            passed: false,
            detail,
            millis,
        },
    }
}

/// Runs the whole suite at the release-gate counts.
pub fn run_selftest(hooks: &SelfTestHooks) -> SelfTestReport {
    let corrupt = hooks.corrupt_task_weights.as_deref();
    let checks = vec![
        timed("global task-weight laws", || {
            check_task_weight_laws(TASK_WEIGHT_INSTANCES, corrupt)
        }),
        timed("client partition laws", || {
            check_partition_laws(PARTITION_INSTANCES)
        }),
        timed("weight normalization laws", || {
            check_normalization_laws(NORMALIZATION_INSTANCES)
        }),
        timed("prompt blend equivalence", || {
            check_blend_equivalence(BLEND_INSTANCES)
        }),
        timed("analytic gradients", || check_gradients(GRADIENT_INSTANCES)),
        timed("experiment determinism", check_determinism),
    ];
    SelfTestReport { checks }
}

/// Global task weights: non-negative, sum to 1 within 1e-12, invariant
/// under positive scaling of the loss matrix.
pub fn check_task_weight_laws(instances: usize, corrupt: Option<&WeightMutator>) -> Check {
    let floor = AggregationParams::default().zero_sum_floor;
    for i in 0..instances {
        let mut rng = seed::rng(seed::mix(0x7a5f_0001, i as u64));
        let k: usize = rng.random_range(2..=12);
        let entries: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..k).map(|_| rng.random_range(0.05..5.0)).collect())
            .collect();
        let matrix = LossMatrix::new(entries.clone(), 1).map_err(|e| e.to_string())?;
        let mut weights = global_task_weights(&matrix, floor)
            .map_err(|e| e.to_string())?
            .values()
            .to_vec();
        if let Some(hook) = corrupt {
            hook(&mut weights);
        }

        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(format!("instance {i} (K={k}): weights sum to {sum}"));
        }
        if let Some(w) = weights.iter().find(|w| **w < 0.0) {
            return Err(format!("instance {i} (K={k}): negative weight {w}"));
        }

        let factor = rng.random_range(0.1..10.0);
        let scaled_entries: Vec<Vec<f64>> = entries
            .iter()
            .map(|row| row.iter().map(|x| factor * x).collect())
            .collect();
        let scaled = LossMatrix::new(scaled_entries, 1).map_err(|e| e.to_string())?;
        let scaled_weights = global_task_weights(&scaled, floor).map_err(|e| e.to_string())?;
        for (j, (a, b)) in weights.iter().zip(scaled_weights.values()).enumerate() {
            if (a - b).abs() > 1e-12 {
                return Err(format!(
                    "instance {i} (K={k}): weight {j} moved from {a} to {b} under scaling by {factor}"
                ));
            }
        }
    }
    Ok(format!("{instances} random loss matrices, K in 2..=12"))
}

/// Client partitions: disjoint, exhaustive, each member obeying its
/// defining inequality, and invariant under exact positive scaling.
pub fn check_partition_laws(instances: usize) -> Check {
    for i in 0..instances {
        let mut rng = seed::rng(seed::mix(0x7a5f_0002, i as u64));
        let k: usize = rng.random_range(1..=12);
        let prev: f64 = rng.random_range(0.05..5.0);
        // alpha in (1, 2]
        let alpha = 2.0 - rng.random::<f64>();
        let losses: Vec<f64> = (0..k).map(|_| prev * rng.random_range(0.2..2.5)).collect();

        let partition = classify_clients(prev, &losses, alpha).map_err(|e| e.to_string())?;
        if !partition.is_partition_of(k) {
            return Err(format!(
                "instance {i} (K={k}): not a disjoint exhaustive partition"
            ));
        }
        for &j in &partition.pc {
            if losses[j] >= prev {
                return Err(format!(
                    "instance {i}: client {j} in PC but loss did not improve"
                ));
            }
        }
        for &j in &partition.rnc {
            if losses[j] < prev || losses[j] >= alpha * prev {
                return Err(format!("instance {i}: client {j} in RNC outside its band"));
            }
        }
        for &j in &partition.dnc {
            if losses[j] < alpha * prev {
                return Err(format!("instance {i}: client {j} in DNC below the cut"));
            }
        }

        // Powers of two scale losses and the threshold exactly.
        let factor = 2f64.powi(rng.random_range(-3..=3));
        let scaled: Vec<f64> = losses.iter().map(|x| factor * x).collect();
        let scaled_partition =
            classify_clients(factor * prev, &scaled, alpha).map_err(|e| e.to_string())?;
        if scaled_partition != partition {
            return Err(format!(
                "instance {i} (K={k}): partition changed under exact scaling by {factor}"
            ));
        }
    }
    Ok(format!("{instances} random instances, alpha in (1, 2]"))
}

/// Normalized local weights: the no-improver branch distributes exactly
/// the mass beta, the improver branch distributes exactly 1, and every
/// documented degenerate fallback behaves as specified.
pub fn check_normalization_laws(instances: usize) -> Check {
    let params = AggregationParams::default();
    for i in 0..instances {
        let mut rng = seed::rng(seed::mix(0x7a5f_0003, i as u64));
        let k: usize = rng.random_range(2..=10);
        let target = rng.random_range(0..k);
        let prev: f64 = rng.random_range(0.2..3.0);
        let alpha = 2.0 - rng.random::<f64>();
        let losses: Vec<f64> = (0..k).map(|_| prev * rng.random_range(0.4..2.2)).collect();
        let dim = rng.random_range(1..=6);
        let pd_prev: Array1<f64> =
            Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let rows = Array2::from_shape_fn((k, dim), |_| rng.sample::<f64, _>(StandardNormal));

        let partition = classify_clients(prev, &losses, alpha).map_err(|e| e.to_string())?;
        let initial = initial_local_weights(
            prev,
            &losses,
            rows.view(),
            pd_prev.view(),
            params.distance_floor,
        )
        .map_err(|e| e.to_string())?;
        let weighting = normalize_local_weights(target, &initial, &partition, &params)
            .map_err(|e| e.to_string())?;
        let weights = weighting.weights.values();
        let sum: f64 = weights.iter().sum();

        for &j in &partition.dnc {
            if weights[j] != 0.0 {
                return Err(format!(
                    "instance {i}: discarded client {j} kept weight {}",
                    weights[j]
                ));
            }
        }
        if partition.pc.is_empty() {
            let rnc_mass: f64 = partition.rnc.iter().map(|&j| initial[j]).sum();
            if partition.rnc.len() >= 2 && rnc_mass.abs() > params.zero_sum_floor {
                if (sum - params.beta).abs() > 1e-12 {
                    return Err(format!(
                        "instance {i}: no-improver weights sum to {sum}, expected beta {}",
                        params.beta
                    ));
                }
            } else if partition.rnc.len() == 1 {
                if weights[partition.rnc[0]] != params.beta {
                    return Err(format!("instance {i}: lone retained client missing beta"));
                }
            } else if partition.rnc.is_empty() && sum != 0.0 {
                return Err(format!(
                    "instance {i}: empty partitions produced mass {sum}"
                ));
            }
        } else {
            // Improver branch: mass 1 whenever the denominator was sound.
            let gamma = weighting.gamma.unwrap_or(0.0);
            let denom: f64 = initial
                .iter()
                .enumerate()
                .filter(|(j, _)| !partition.dnc.contains(j))
                .map(|(_, w)| if *w >= 0.0 { *w } else { gamma * *w })
                .sum();
            if denom.abs() > params.zero_sum_floor && (sum - 1.0).abs() > 1e-12 {
                return Err(format!("instance {i}: improver weights sum to {sum}"));
            }
        }
    }

    // Constructed degenerate fallbacks, exercised every invocation.
    let two_retained = ClientPartition {
        pc: vec![],
        rnc: vec![0, 1],
        dnc: vec![],
    };
    let uniform = normalize_local_weights(0, &[0.0, 0.0], &two_retained, &params)
        .map_err(|e| e.to_string())?;
    let expected = params.beta / 2.0;
    if uniform.weights.values() != [expected, expected] {
        return Err("vanishing retained mass did not fall back to uniform beta".into());
    }

    let mut fixed = params;
    fixed.gamma_mode = GammaMode::Fixed(1.0);
    let cancelling = ClientPartition {
        pc: vec![0],
        rnc: vec![1],
        dnc: vec![],
    };
    let fallback = normalize_local_weights(0, &[1e-20, -1e-20], &cancelling, &fixed)
        .map_err(|e| e.to_string())?;
    if fallback.weights.values() != [1.0, 0.0] {
        return Err("vanishing denominator did not fall back to improvers only".into());
    }

    Ok(format!(
        "{instances} random instances plus constructed fallbacks"
    ))
}

/// The data-prompt blend: the incremental update form and the convex
/// combination form agree within 1e-10.
pub fn check_blend_equivalence(instances: usize) -> Check {
    for i in 0..instances {
        let mut rng = seed::rng(seed::mix(0x7a5f_0004, i as u64));
        let k: usize = rng.random_range(1..=8);
        let dim = rng.random_range(1..=16);
        let pd_prev: Array1<f64> =
            Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let rows = Array2::from_shape_fn((k, dim), |_| rng.sample::<f64, _>(StandardNormal));
        let values: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
        let weights = WeightVector::local_data(0, values.clone()).map_err(|e| e.to_string())?;

        let incremental = aggregate_data_prompt(pd_prev.view(), rows.view(), &weights)
            .map_err(|e| e.to_string())?;
        let total: f64 = values.iter().sum();
        let mut convex = &pd_prev * (1.0 - total);
        for (j, value) in values.iter().enumerate() {
            convex.scaled_add(*value, &rows.row(j));
        }
        for (j, (a, b)) in incremental.iter().zip(convex.iter()).enumerate() {
            if (a - b).abs() > 1e-10 {
                return Err(format!(
                    "instance {i}: coordinate {j} disagrees, incremental {a} vs convex {b}"
                ));
            }
        }
    }
    Ok(format!("{instances} random instances"))
}

/// Analytic gradients against central finite differences (h = 1e-5,
/// relative error < 1e-4) on random small instances.
pub fn check_gradients(instances: usize) -> Check {
    let h = 1e-5;
    for i in 0..instances {
        let mut rng = seed::rng(seed::mix(0x7a5f_0005, i as u64));
        let dims = Dims {
            classes: rng.random_range(2..=5),
            input_dim: rng.random_range(3..=6),
            class_embed_dim: rng.random_range(2..=4),
            task_prompt_dim: rng.random_range(2..=4),
            image_prompt_dim: rng.random_range(2..=4),
            feature_dim: rng.random_range(3..=6),
        };
        let backbone = build_backbone(seed::mix(0x7a5f_0006, i as u64), dims, 10.0)
            .map_err(|e| e.to_string())?;
        let (task, data) = init_prompts(seed::mix(0x7a5f_0007, i as u64), &dims, 0.2);
        let n = rng.random_range(3..=6);
        let features = Array2::from_shape_fn((n, dims.input_dim), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..dims.classes)).collect();
        let batch = Batch::new(features, labels).map_err(|e| e.to_string())?;

        let (_, grad_task, grad_data) =
            loss_and_grad(&backbone, &task, &data, &batch).map_err(|e| e.to_string())?;

        let compare =
            |analytic: f64, numeric: f64, what: &str| -> std::result::Result<(), String> {
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                if ((analytic - numeric) / denom).abs() >= 1e-4 {
                    return Err(format!(
                        "instance {i}: {what} analytic {analytic} vs numeric {numeric}"
                    ));
                }
                Ok(())
            };

        for j in 0..dims.task_prompt_dim {
            let mut plus = task.values().clone();
            plus[j] += h;
            let mut minus = task.values().clone();
            minus[j] -= h;
            let up = eval_loss(
                &backbone,
                &crate::surrogate::TaskPrompt::new(plus).map_err(|e| e.to_string())?,
                &data,
                &batch,
            )
            .map_err(|e| e.to_string())?;
            let down = eval_loss(
                &backbone,
                &crate::surrogate::TaskPrompt::new(minus).map_err(|e| e.to_string())?,
                &data,
                &batch,
            )
            .map_err(|e| e.to_string())?;
            compare(grad_task[j], (up - down) / (2.0 * h), &format!("task[{j}]"))?;
        }

        let flat = data.flatten();
        for j in 0..flat.len() {
            let mut plus = flat.clone();
            plus[j] += h;
            let mut minus = flat.clone();
            minus[j] -= h;
            let dp_plus = crate::surrogate::DataPrompt::from_flat(
                plus.view(),
                dims.image_prompt_dim,
                dims.task_prompt_dim,
            )
            .map_err(|e| e.to_string())?;
            let dp_minus = crate::surrogate::DataPrompt::from_flat(
                minus.view(),
                dims.image_prompt_dim,
                dims.task_prompt_dim,
            )
            .map_err(|e| e.to_string())?;
            let up = eval_loss(&backbone, &task, &dp_plus, &batch).map_err(|e| e.to_string())?;
            let down = eval_loss(&backbone, &task, &dp_minus, &batch).map_err(|e| e.to_string())?;
            compare(grad_data[j], (up - down) / (2.0 * h), &format!("data[{j}]"))?;
        }
    }
    Ok(format!("{instances} random instances, h = 1e-5"))
}

/// Two identical tiny experiments agree bitwise, artifacts included.
pub fn check_determinism() -> Check {
    let config = ExperimentConfig {
        seed: 17,
        num_clients: 3,
        rounds: 2,
        classes: 4,
        dims: DimsConfig {
            input_dim: 6,
            class_embed_dim: 4,
            task_prompt_dim: 3,
            image_prompt_dim: 3,
            feature_dim: 5,
        },
        train: TrainHyper {
            epochs: 2,
            ..TrainHyper::default()
        },
        ..ExperimentConfig::default()
    };

    let first = run_method(&config).map_err(|e| e.to_string())?;
    let second = run_method(&config).map_err(|e| e.to_string())?;
    if first != second {
        return Err("two identical runs diverged".into());
    }
    if metrics_csv(&first.summary) != metrics_csv(&second.summary) {
        return Err("metrics CSV differs between identical runs".into());
    }
    let a = serde_json::to_string(&first.summary).map_err(|e| e.to_string())?;
    let b = serde_json::to_string(&second.summary).map_err(|e| e.to_string())?;
    if a != b {
        return Err("summary JSON differs between identical runs".into());
    }
    Ok("two runs, bitwise-identical records and artifacts".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_suite_passes_on_a_healthy_build() {
        // Small counts keep this a smoke test; the release-gate counts run
        // in the acceptance suite and the command-line selftest.
        assert!(check_task_weight_laws(25, None).is_ok());
        assert!(check_partition_laws(25).is_ok());
        assert!(check_normalization_laws(25).is_ok());
        assert!(check_blend_equivalence(25).is_ok());
        assert!(check_gradients(4).is_ok());
        assert!(check_determinism().is_ok());
    }

    #[test]
    fn corrupted_task_weights_trip_the_canary() {
        let sabotage = |weights: &mut Vec<f64>| weights[0] += 0.25;
        let result = check_task_weight_laws(5, Some(&sabotage));
        assert!(result.is_err());
        assert!(result.unwrap_err().contains("sum"));
    }

    #[test]
    fn the_report_renders_one_line_per_check_plus_a_verdict() {
        let report = SelfTestReport {
            checks: vec![
                CheckOutcome {
                    name: "alpha",
                    passed: true,
                    detail: "fine".into(),
                    millis: 3,
                },
                CheckOutcome {
                    name: "beta",
                    passed: false,
                    detail: "broken".into(),
                    millis: 5,
                },
            ],
        };
        assert!(!report.all_passed());
        let text = report.render();
        assert!(text.contains("PASS  alpha"));
        assert!(text.contains("FAIL  beta"));
        assert!(text.trim_end().ends_with("overall: FAIL"));
    }

    #[test]
    fn the_full_suite_reports_six_checks() {
        let report = run_selftest(&SelfTestHooks::default());
        assert_eq!(report.checks.len(), 6);
        assert!(report.all_passed(), "\n{}", report.render());
    }

    #[test]
    fn hooked_suites_fail_overall() {
        let hooks = SelfTestHooks {
            corrupt_task_weights: Some(Box::new(|weights| weights[0] = -1.0)),
        };
        let report = run_selftest(&hooks);
        assert!(!report.all_passed());
        // Only the sabotaged check fails.
        for check in &report.checks {
            assert_eq!(check.passed, check.name != "global task-weight laws");
        }
    }
}
