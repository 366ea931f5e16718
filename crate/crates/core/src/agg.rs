//! The aggregation calculus: everything the server and clients compute from
//! a round's loss matrix and freshly trained prompts.
//!
//! The global side weights each client's task prompt by how well its trained
//! model generalized across *all* validation sets (lower total loss → larger
//! weight). The local side is per-client: peers are partitioned into
//! positive, retained-negative, and discarded contributors relative to the
//! client's own previous loss, given signed initial weights from their loss
//! improvement per unit of prompt movement, and normalized branch-by-branch
//! so the final mixture is controlled even when every peer underperforms.
//!
//! Every function here is pure; the protocol layer owns all state.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the global weight vector's sum-to-one invariant.
const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// A round's full cross-evaluation: entry `(i, j)` is the loss of client
/// `i`'s freshly trained model on client `j`'s validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMatrix {
    entries: Vec<Vec<f64>>,
    round: usize,
}

impl LossMatrix {
    /// Validates squareness and that every entry is a finite, non-negative
    /// loss.
    pub fn new(entries: Vec<Vec<f64>>, round: usize) -> Result<LossMatrix> {
        let k = entries.len();
        if k == 0 {
            return Err(Error::InvalidLoss("loss matrix must be non-empty".into()));
        }
        for (i, row) in entries.iter().enumerate() {
            if row.len() != k {
                return Err(Error::DimensionMismatch {
                    what: "loss matrix row length",
                    expected: k,
                    got: row.len(),
                });
            }
            for (j, &value) in row.iter().enumerate() {
                if !value.is_finite() || value < 0.0 {
                    return Err(Error::InvalidLoss(format!(
                        "loss matrix entry ({i}, {j}) is {value}; losses must be finite and >= 0"
                    )));
                }
            }
        }
        Ok(LossMatrix { entries, round })
    }

    /// Number of clients (the matrix is `K x K`).
    pub fn num_clients(&self) -> usize {
        self.entries.len()
    }

    /// The training round this matrix belongs to.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Loss of client `i`'s trained model on client `j`'s validation set.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }

    /// Row `i`: client `i`'s losses across every validation set.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i]
    }

    /// Column `j`: every client's loss on validation set `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.entries.iter().map(|row| row[j]).collect()
    }

    /// Sum of row `k` — client `k`'s total loss across validation sets.
    pub fn row_sum(&self, k: usize) -> f64 {
        self.entries[k].iter().sum()
    }

    /// Sum of all entries.
    pub fn total(&self) -> f64 {
        (0..self.num_clients()).map(|k| self.row_sum(k)).sum()
    }
}

/// One client's view of its peers, split by whether their round update
/// helped on the client's own validation set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    /// Positive contributors: their loss beat the client's previous loss.
    pub pc: Vec<usize>,
    /// Retained negatives: worse, but within the tolerance band.
    pub rnc: Vec<usize>,
    /// Discarded negatives: past the tolerance band; weight forced to zero.
    pub dnc: Vec<usize>,
}

impl ClientPartition {
    /// True when the three sets are sorted, pairwise disjoint, and together
    /// cover exactly `0..k`.
    pub fn is_partition_of(&self, k: usize) -> bool {
        let mut all: Vec<usize> = self
            .pc
            .iter()
            .chain(&self.rnc)
            .chain(&self.dnc)
            .copied()
            .collect();
        all.sort_unstable();
        all == (0..k).collect::<Vec<_>>()
            && self.pc.windows(2).all(|w| w[0] < w[1])
            && self.rnc.windows(2).all(|w| w[0] < w[1])
            && self.dnc.windows(2).all(|w| w[0] < w[1])
    }
}

/// How the down-weighting factor for retained-negative contributions is
/// chosen.
///
/// Serialized as a plain string: `"adaptive"` or `"fixed:<value>"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaMode {
    /// Derive the factor each round from the spread of initial weights.
    Adaptive,
    /// Use one constant factor everywhere.
    Fixed(f64),
}

impl GammaMode {
    /// Validates the fixed factor when present.
    pub fn validate(&self) -> Result<()> {
        if let GammaMode::Fixed(value) = self {
            if !value.is_finite() || *value < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "fixed gamma must be finite and >= 0, got {value}"
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for GammaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GammaMode::Adaptive => write!(f, "adaptive"),
            GammaMode::Fixed(value) => write!(f, "fixed:{value}"),
        }
    }
}

impl std::str::FromStr for GammaMode {
    type Err = Error;

    fn from_str(text: &str) -> Result<GammaMode> {
        if text == "adaptive" {
            return Ok(GammaMode::Adaptive);
        }
        if let Some(value) = text.strip_prefix("fixed:") {
            let value: f64 = value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad fixed gamma value in {text:?}")))?;
            let mode = GammaMode::Fixed(value);
            mode.validate()?;
            return Ok(mode);
        }
        Err(Error::InvalidConfig(format!(
            "gamma mode must be \"adaptive\" or \"fixed:<value>\", got {text:?}"
        )))
    }
}

impl Serialize for GammaMode {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GammaMode {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Knobs of the aggregation calculus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationParams {
    /// Loss tolerance threshold separating retained from discarded
    /// negatives (a peer is retained while its loss stays below
    /// `alpha` times the client's previous loss).
    pub alpha: f64,
    /// Total weight granted when no peer actually improved on the client's
    /// previous loss; keeps the update small in all-negative rounds.
    pub beta: f64,
    /// How the retained-negative down-weighting factor is chosen.
    pub gamma_mode: GammaMode,
    /// Lower clamp for prompt-movement distances, preventing division by
    /// zero when a trained prompt returns unchanged.
    pub distance_floor: f64,
    /// Threshold below which a normalization denominator counts as zero and
    /// the branch's degenerate rule applies.
    pub zero_sum_floor: f64,
}

impl Default for AggregationParams {
    fn default() -> Self {
        AggregationParams {
            alpha: 1.2,
            beta: 0.2,
            gamma_mode: GammaMode::Adaptive,
            distance_floor: 1e-6,
            zero_sum_floor: 1e-12,
        }
    }
}

impl AggregationParams {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and > 1, got {}",
                self.alpha
            )));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 || self.beta > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        self.gamma_mode.validate()?;
        for (name, value) in [
            ("distance_floor", self.distance_floor),
            ("zero_sum_floor", self.zero_sum_floor),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and > 0, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// What a weight vector is for; the global context carries stronger
/// invariants than the local one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightContext {
    /// Weights for the server-side prompt average.
    GlobalTask,
    /// Weights for one client's local data-prompt mixture.
    LocalData { target: usize },
}

/// A validated per-client weight vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
    context: WeightContext,
}

impl WeightVector {
    /// Builds a global weight vector: entries must be finite, non-negative,
    /// and sum to one within `1e-12`.
    pub fn global_task(values: Vec<f64>) -> Result<WeightVector> {
        if values.is_empty() {
            return Err(Error::InvalidWeights("weight vector is empty".into()));
        }
        for (k, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidWeights(format!(
                    "global weight {k} is {value}; must be finite and >= 0"
                )));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidWeights(format!(
                "global weights sum to {sum}, expected 1"
            )));
        }
        Ok(WeightVector {
            values,
            context: WeightContext::GlobalTask,
        })
    }

    /// Builds a local mixture weight vector for client `target`. Entries may
    /// be negative (retained negatives contribute with reversed sign), so
    /// only finiteness is required.
    pub fn local_data(target: usize, values: Vec<f64>) -> Result<WeightVector> {
        if values.is_empty() {
            return Err(Error::InvalidWeights("weight vector is empty".into()));
        }
        if let Some((k, value)) = values
            .iter()
            .enumerate()
            .find(|(_, value)| !value.is_finite())
        {
            return Err(Error::InvalidWeights(format!(
                "local weight {k} for client {target} is {value}; must be finite"
            )));
        }
        Ok(WeightVector {
            values,
            context: WeightContext::LocalData { target },
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn context(&self) -> WeightContext {
        self.context
    }
}

/// Server-side weights for averaging the trained task prompts.
///
/// Client `k`'s weight is `(S - S_k) / (S * (K - 1))`, where `S_k` is its
/// loss-matrix row sum and `S` the grand total: clients whose trained model
/// generalized best (lowest total loss) weigh the most. When the grand total
/// is below `zero_sum_floor` every row is equally good, so the weights fall
/// back to uniform.
pub fn global_task_weights(losses: &LossMatrix, zero_sum_floor: f64) -> Result<WeightVector> {
    let k = losses.num_clients();
    if k < 2 {
        return Err(Error::InvalidWeights(format!(
            "global task weights need at least 2 clients, got {k}"
        )));
    }
    let total = losses.total();
    let values = if total < zero_sum_floor {
        vec![1.0 / k as f64; k]
    } else {
        (0..k)
            .map(|i| (total - losses.row_sum(i)) / (total * (k - 1) as f64))
            .collect()
    };
    WeightVector::global_task(values)
}

/// Weighted sum of prompt rows: `sum_k w_k * rows[k]`.
pub fn aggregate_prompt_rows(
    rows: ArrayView2<'_, f64>,
    weights: &WeightVector,
) -> Result<Array1<f64>> {
    if rows.nrows() != weights.len() {
        return Err(Error::DimensionMismatch {
            what: "prompt rows vs weight count",
            expected: weights.len(),
            got: rows.nrows(),
        });
    }
    let mut out = Array1::<f64>::zeros(rows.ncols());
    for (row, &weight) in rows.rows().into_iter().zip(weights.values()) {
        out.scaled_add(weight, &row);
    }
    Ok(out)
}

/// Splits all clients (the target included) by how their freshly trained
/// models scored on the target's validation set, relative to the target's
/// previous self-loss: strictly better → positive; worse but below
/// `alpha` times the previous loss → retained negative; beyond → discarded.
pub fn classify_clients(
    prev_self_loss: f64,
    losses_on_target: &[f64],
    alpha: f64,
) -> Result<ClientPartition> {
    if !prev_self_loss.is_finite() || prev_self_loss < 0.0 {
        return Err(Error::InvalidLoss(format!(
            "previous self-loss must be finite and >= 0, got {prev_self_loss}"
        )));
    }
    if !alpha.is_finite() || alpha <= 1.0 {
        return Err(Error::InvalidConfig(format!(
            "alpha must be finite and > 1, got {alpha}"
        )));
    }
    let mut partition = ClientPartition {
        pc: Vec::new(),
        rnc: Vec::new(),
        dnc: Vec::new(),
    };
    for (i, &loss) in losses_on_target.iter().enumerate() {
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::InvalidLoss(format!(
                "loss of client {i} is {loss}; losses must be finite and >= 0"
            )));
        }
        if loss < prev_self_loss {
            partition.pc.push(i);
        } else if loss < alpha * prev_self_loss {
            partition.rnc.push(i);
        } else {
            partition.dnc.push(i);
        }
    }
    Ok(partition)
}

/// Signed initial weight of every peer's trained data prompt for one target
/// client: loss improvement over the target's previous self-loss, per unit
/// of Euclidean movement of the peer's data prompt (clamped below by
/// `distance_floor` so an unmoved prompt cannot blow the ratio up).
pub fn initial_local_weights(
    prev_self_loss: f64,
    losses_on_target: &[f64],
    trained_data_prompts: ArrayView2<'_, f64>,
    pd_prev: ArrayView1<'_, f64>,
    distance_floor: f64,
) -> Result<Vec<f64>> {
    if trained_data_prompts.nrows() != losses_on_target.len() {
        return Err(Error::DimensionMismatch {
            what: "trained prompt rows vs loss count",
            expected: losses_on_target.len(),
            got: trained_data_prompts.nrows(),
        });
    }
    if trained_data_prompts.ncols() != pd_prev.len() {
        return Err(Error::DimensionMismatch {
            what: "trained prompt width vs previous prompt length",
            expected: pd_prev.len(),
            got: trained_data_prompts.ncols(),
        });
    }
    Ok(losses_on_target
        .iter()
        .enumerate()
        .map(|(i, &loss)| {
            let diff = &trained_data_prompts.row(i) - &pd_prev;
            let distance = diff.dot(&diff).sqrt();
            (prev_self_loss - loss) / distance.max(distance_floor)
        })
        .collect())
}

/// The adaptive down-weighting factor for retained negatives: one third of
/// the smallest positive-contributor magnitude over the largest
/// retained-negative magnitude. Zero when the retained negatives carry no
/// magnitude at all.
pub fn gamma_adaptive(
    initial_weights: &[f64],
    partition: &ClientPartition,
    zero_sum_floor: f64,
) -> Result<f64> {
    if partition.pc.is_empty() || partition.rnc.is_empty() {
        return Err(Error::InvalidWeights(
            "adaptive gamma needs both positive and retained-negative clients".into(),
        ));
    }
    let min_pc = partition
        .pc
        .iter()
        .map(|&i| initial_weights[i].abs())
        .fold(f64::INFINITY, f64::min);
    let max_rnc = partition
        .rnc
        .iter()
        .map(|&i| initial_weights[i].abs())
        .fold(0.0, f64::max);
    if max_rnc < zero_sum_floor {
        return Ok(0.0);
    }
    Ok((1.0 / 3.0) * (min_pc / max_rnc))
}

/// A normalized local weight vector plus the factor that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalWeighting {
    pub weights: WeightVector,
    /// The retained-negative factor actually used; `None` when no branch
    /// needed one.
    pub gamma: Option<f64>,
}

/// Normalizes signed initial weights into the final local mixture.
///
/// Discarded negatives always get zero. When nobody improved, the retained
/// negatives share a fixed total of `beta` — inverted so the *least* bad
/// peer gets the most weight — or the lone retained negative takes all of
/// `beta`; with no retained negatives either, the vector is all zero and
/// the client keeps its prompt. When at least one peer improved, negative
/// entries are damped by `gamma` and the result is scaled to sum to one;
/// if the damped sum still collapses, only the positive contributors are
/// kept and normalized among themselves.
pub fn normalize_local_weights(
    target: usize,
    initial_weights: &[f64],
    partition: &ClientPartition,
    params: &AggregationParams,
) -> Result<LocalWeighting> {
    params.validate()?;
    let k = initial_weights.len();
    if !partition.is_partition_of(k) {
        return Err(Error::InvalidWeights(format!(
            "partition does not cover exactly the {k} initial weights"
        )));
    }
    if let Some((i, &value)) = initial_weights
        .iter()
        .enumerate()
        .find(|(_, value)| !value.is_finite())
    {
        return Err(Error::InvalidWeights(format!(
            "initial weight {i} is {value}; must be finite"
        )));
    }

    let mut values = vec![0.0; k];
    let gamma;
    if partition.pc.is_empty() {
        gamma = None;
        match partition.rnc.len() {
            0 => {}
            1 => values[partition.rnc[0]] = params.beta,
            len => {
                let rnc_sum: f64 = partition.rnc.iter().map(|&i| initial_weights[i]).sum();
                if rnc_sum.abs() < params.zero_sum_floor {
                    for &i in &partition.rnc {
                        values[i] = params.beta / len as f64;
                    }
                } else {
                    for &i in &partition.rnc {
                        values[i] = params.beta * (rnc_sum - initial_weights[i])
                            / (rnc_sum * (len - 1) as f64);
                    }
                }
            }
        }
    } else {
        let used_gamma = if partition.rnc.is_empty() {
            None
        } else {
            Some(match params.gamma_mode {
                GammaMode::Fixed(value) => value,
                GammaMode::Adaptive => {
                    gamma_adaptive(initial_weights, partition, params.zero_sum_floor)?
                }
            })
        };
        gamma = used_gamma;
        let damp = |w: f64| {
            if w >= 0.0 {
                w
            } else {
                used_gamma.expect("negative weights only occur with retained negatives") * w
            }
        };
        let contributors = partition.pc.iter().chain(&partition.rnc);
        let denominator: f64 = contributors
            .clone()
            .map(|&i| damp(initial_weights[i]))
            .sum();
        if denominator < params.zero_sum_floor {
            let pc_sum: f64 = partition.pc.iter().map(|&i| initial_weights[i]).sum();
            for &i in &partition.pc {
                values[i] = initial_weights[i] / pc_sum;
            }
        } else {
            for &i in contributors {
                values[i] = damp(initial_weights[i]) / denominator;
            }
        }
    }
    Ok(LocalWeighting {
        weights: WeightVector::local_data(target, values)?,
        gamma,
    })
}

/// Moves a client's data prompt toward the weighted peers:
/// `pd_prev + sum_i w_i * (trained[i] - pd_prev)`.
pub fn aggregate_data_prompt(
    pd_prev: ArrayView1<'_, f64>,
    trained_data_prompts: ArrayView2<'_, f64>,
    weights: &WeightVector,
) -> Result<Array1<f64>> {
    if trained_data_prompts.nrows() != weights.len() {
        return Err(Error::DimensionMismatch {
            what: "trained prompt rows vs weight count",
            expected: weights.len(),
            got: trained_data_prompts.nrows(),
        });
    }
    if trained_data_prompts.ncols() != pd_prev.len() {
        return Err(Error::DimensionMismatch {
            what: "trained prompt width vs previous prompt length",
            expected: pd_prev.len(),
            got: trained_data_prompts.ncols(),
        });
    }
    let mut out = pd_prev.to_owned();
    for (row, &weight) in trained_data_prompts
        .rows()
        .into_iter()
        .zip(weights.values())
    {
        let delta = &row - &pd_prev;
        out.scaled_add(weight, &delta);
    }
    Ok(out)
}

/// Everything one client's local aggregation step produced, kept for the
/// round record.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAggregation {
    /// The client's new data prompt, flattened.
    pub data_prompt: Array1<f64>,
    pub partition: ClientPartition,
    pub initial_weights: Vec<f64>,
    pub weights: WeightVector,
    pub gamma: Option<f64>,
}

/// One client's complete local aggregation: classify peers, compute signed
/// initial weights, normalize them, and mix the trained data prompts into
/// the client's previous one.
pub fn local_aggregate(
    target: usize,
    prev_self_loss: f64,
    losses_on_target: &[f64],
    trained_data_prompts: ArrayView2<'_, f64>,
    pd_prev: ArrayView1<'_, f64>,
    params: &AggregationParams,
) -> Result<LocalAggregation> {
    let partition = classify_clients(prev_self_loss, losses_on_target, params.alpha)?;
    let initial_weights = initial_local_weights(
        prev_self_loss,
        losses_on_target,
        trained_data_prompts,
        pd_prev,
        params.distance_floor,
    )?;
    let weighting = normalize_local_weights(target, &initial_weights, &partition, params)?;
    let data_prompt = aggregate_data_prompt(pd_prev, trained_data_prompts, &weighting.weights)?;
    Ok(LocalAggregation {
        data_prompt,
        partition,
        initial_weights,
        weights: weighting.weights,
        gamma: weighting.gamma,
    })
}

/// Server-side data prompt: the freshly trained data prompts averaged with
/// the same weights as the task prompts. This is what newcomers start from.
pub fn global_data_prompt(
    trained_data_prompts: ArrayView2<'_, f64>,
    task_weights: &WeightVector,
) -> Result<Array1<f64>> {
    aggregate_prompt_rows(trained_data_prompts, task_weights)
}
