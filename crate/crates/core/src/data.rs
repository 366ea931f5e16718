//! Synthetic task and client-dataset generation.
//!
//! A *task* is a Gaussian mixture classification problem: each class has a
//! mean placed on a sphere of configurable radius, and samples are drawn
//! around those means with isotropic noise. Client datasets are made
//! heterogeneous the same way across the federation: every client drops a
//! random fraction of the classes, keeps only a few-shot sliver of each
//! retained class, and oversamples one randomly chosen *dominant* class.
//!
//! All generators are pure functions of their seeds, so any dataset can be
//! reproduced bitwise from the experiment configuration alone.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::surrogate::Batch;

/// Tolerance below which two class-mean directions count as colliding.
const DIRECTION_TOLERANCE: f64 = 1e-9;

/// A synthetic classification task: one Gaussian cluster per class.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    /// Row `c` is the mean of class `c`; shape `classes x input_dim`.
    class_means: Array2<f64>,
    noise_sigma: f64,
    mean_radius: f64,
    seed: u64,
}

impl TaskSpec {
    /// Number of classes in the task.
    pub fn num_classes(&self) -> usize {
        self.class_means.nrows()
    }

    /// Dimension of the raw input vectors.
    pub fn input_dim(&self) -> usize {
        self.class_means.ncols()
    }

    /// The mean vector of one class.
    pub fn class_mean(&self, class: usize) -> ArrayView1<'_, f64> {
        self.class_means.row(class)
    }

    /// All class means as a `classes x input_dim` view.
    pub fn class_means(&self) -> ArrayView2<'_, f64> {
        self.class_means.view()
    }

    /// Standard deviation of the isotropic sampling noise.
    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Radius of the sphere the class means sit on.
    pub fn mean_radius(&self) -> f64 {
        self.mean_radius
    }

    /// Seed the means were generated from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Returns a task whose class labels are renamed by `assignment`: the
    /// class currently called `c` becomes class `assignment[c]`. The mean
    /// vectors themselves are untouched; only which label refers to which
    /// mean changes. `assignment` must be a permutation of `0..classes`.
    pub fn relabeled(&self, assignment: &[usize]) -> Result<TaskSpec> {
        let classes = self.num_classes();
        if assignment.len() != classes {
            return Err(Error::InvalidConfig(format!(
                "relabeling needs one target per class: got {} for {classes} classes",
                assignment.len()
            )));
        }
        let mut seen = vec![false; classes];
        for &target in assignment {
            if target >= classes || seen[target] {
                return Err(Error::InvalidConfig(format!(
                    "relabeling is not a permutation of 0..{classes}"
                )));
            }
            seen[target] = true;
        }
        let mut class_means = Array2::zeros((classes, self.input_dim()));
        for (source, &target) in assignment.iter().enumerate() {
            class_means
                .row_mut(target)
                .assign(&self.class_means.row(source));
        }
        Ok(TaskSpec {
            class_means,
            noise_sigma: self.noise_sigma,
            mean_radius: self.mean_radius,
            seed: self.seed,
        })
    }
}

/// Controls how skewed each client's local data is.
///
/// Defaults model the few-shot heterogeneity setup: start from a 16-shot
/// pool per class, drop 20% of the classes entirely, retain 25% of the pool
/// (4 shots) for ordinary classes, and let one dominant class keep 75%
/// (12 shots). Validation and test splits are uniform across the retained
/// classes, with the validation split deliberately the smallest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Size of the per-class sample pool the fractions refer to.
    pub shot: usize,
    /// Fraction of classes each client drops entirely.
    pub drop_frac: f64,
    /// Fraction of the pool kept for each non-dominant retained class.
    pub retain_frac: f64,
    /// Fraction of the pool kept for the dominant class.
    pub dominant_frac: f64,
    /// Validation samples drawn per retained class.
    pub val_per_class: usize,
    /// Test samples drawn per retained class.
    pub test_per_class: usize,
    /// When true, the dominant class receives the dominant share *on top of*
    /// the ordinary few-shot share instead of replacing it.
    pub dominant_additive: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            shot: 16,
            drop_frac: 0.20,
            retain_frac: 0.25,
            dominant_frac: 0.75,
            val_per_class: 2,
            test_per_class: 8,
            dominant_additive: false,
        }
    }
}

impl SamplerConfig {
    /// Checks field ranges and the relative split sizes.
    pub fn validate(&self) -> Result<()> {
        if self.shot == 0 {
            return Err(Error::InvalidConfig(
                "sampler shot must be at least 1".into(),
            ));
        }
        for (name, value) in [
            ("drop_frac", self.drop_frac),
            ("retain_frac", self.retain_frac),
            ("dominant_frac", self.dominant_frac),
        ] {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidConfig(format!(
                    "sampler {name} must lie in [0, 1], got {value}"
                )));
            }
        }
        if self.val_per_class == 0 {
            return Err(Error::InvalidConfig(
                "sampler val_per_class must be at least 1".into(),
            ));
        }
        if self.val_per_class >= self.test_per_class {
            return Err(Error::InvalidConfig(format!(
                "sampler val_per_class ({}) must be smaller than test_per_class ({})",
                self.val_per_class, self.test_per_class
            )));
        }
        Ok(())
    }

    /// Training samples per non-dominant retained class.
    pub fn few_shot_count(&self) -> usize {
        (self.shot as f64 * self.retain_frac).round() as usize
    }

    /// Training samples for the dominant class.
    pub fn dominant_count(&self) -> usize {
        let base = (self.shot as f64 * self.dominant_frac).round() as usize;
        if self.dominant_additive {
            base + self.few_shot_count()
        } else {
            base
        }
    }
}

/// One client's local data: which classes it sees and its three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    client_id: usize,
    /// Sorted ascending; every split's labels are drawn from this set.
    present_classes: Vec<usize>,
    dominant_class: usize,
    train: Batch,
    validation: Batch,
    test: Batch,
}

impl ClientDataset {
    /// Builds a dataset and checks every structural invariant: the dominant
    /// class is present, all labels fall inside the present set, the splits
    /// share no sample vector, and validation is strictly smaller than test.
    pub fn new(
        client_id: usize,
        present_classes: Vec<usize>,
        dominant_class: usize,
        train: Batch,
        validation: Batch,
        test: Batch,
    ) -> Result<ClientDataset> {
        if present_classes.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "client {client_id} has no present classes"
            )));
        }
        if present_classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "present classes of client {client_id} must be sorted and distinct"
            )));
        }
        if !present_classes.contains(&dominant_class) {
            return Err(Error::InvalidConfig(format!(
                "dominant class {dominant_class} of client {client_id} is not present"
            )));
        }
        for (name, split) in [
            ("train", &train),
            ("validation", &validation),
            ("test", &test),
        ] {
            if split.is_empty() {
                return Err(Error::EmptySplit(name));
            }
            if let Some(bad) = split
                .labels()
                .iter()
                .find(|label| !present_classes.contains(label))
            {
                return Err(Error::InvalidLabel {
                    label: *bad,
                    classes: present_classes.len(),
                });
            }
        }
        if validation.len() >= test.len() {
            return Err(Error::InvalidConfig(format!(
                "client {client_id}: validation split ({}) must be smaller than test split ({})",
                validation.len(),
                test.len()
            )));
        }
        let splits = [&train, &validation, &test];
        for a in 0..splits.len() {
            for b in (a + 1)..splits.len() {
                if share_a_sample(splits[a], splits[b]) {
                    return Err(Error::InvalidConfig(format!(
                        "client {client_id}: splits share a sample vector"
                    )));
                }
            }
        }
        Ok(ClientDataset {
            client_id,
            present_classes,
            dominant_class,
            train,
            validation,
            test,
        })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    /// Classes this client has data for, sorted ascending.
    pub fn present_classes(&self) -> &[usize] {
        &self.present_classes
    }

    /// The oversampled class.
    pub fn dominant_class(&self) -> usize {
        self.dominant_class
    }

    pub fn train(&self) -> &Batch {
        &self.train
    }

    pub fn validation(&self) -> &Batch {
        &self.validation
    }

    pub fn test(&self) -> &Batch {
        &self.test
    }
}

/// True when any sample vector appears in both batches.
fn share_a_sample(a: &Batch, b: &Batch) -> bool {
    (0..a.len()).any(|i| (0..b.len()).any(|j| a.feature(i) == b.feature(j)))
}

/// Generates the class means for a synthetic task.
///
/// Means are unit directions drawn from the seeded generator, scaled to
/// `mean_radius`. A zero radius collapses every mean to the origin (labels
/// then carry no signal), which is allowed for degenerate baselines; with a
/// positive radius the directions must be pairwise distinct.
pub fn make_task(
    seed_value: u64,
    classes: usize,
    input_dim: usize,
    mean_radius: f64,
    noise_sigma: f64,
) -> Result<TaskSpec> {
    if classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "a task needs at least 2 classes, got {classes}"
        )));
    }
    if input_dim < 2 {
        return Err(Error::InvalidConfig(format!(
            "task input dimension must be at least 2, got {input_dim}"
        )));
    }
    if !mean_radius.is_finite() || mean_radius < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "mean radius must be finite and non-negative, got {mean_radius}"
        )));
    }
    if !noise_sigma.is_finite() || noise_sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "noise sigma must be finite and positive, got {noise_sigma}"
        )));
    }
    let mut rng = seed::rng(seed::stream(seed_value, "task.means"));
    let mut directions = Array2::<f64>::zeros((classes, input_dim));
    for mut row in directions.rows_mut() {
        let mut norm_sq = 0.0;
        for value in row.iter_mut() {
            let draw: f64 = rng.sample(StandardNormal);
            *value = draw;
            norm_sq += draw * draw;
        }
        let norm = norm_sq.sqrt();
        if norm < DIRECTION_TOLERANCE {
            return Err(Error::DegenerateInput(
                "drew a near-zero direction for a class mean".into(),
            ));
        }
        row.mapv_inplace(|v| v / norm);
    }
    if mean_radius > 0.0 {
        for i in 0..classes {
            for j in (i + 1)..classes {
                let dist_sq: f64 = directions
                    .row(i)
                    .iter()
                    .zip(directions.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist_sq.sqrt() < DIRECTION_TOLERANCE {
                    return Err(Error::DegenerateInput(format!(
                        "class mean directions {i} and {j} coincide; \
                         {classes} classes do not fit distinctly in dimension {input_dim}"
                    )));
                }
            }
        }
    }
    Ok(TaskSpec {
        class_means: directions * mean_radius,
        noise_sigma,
        mean_radius,
        seed: seed_value,
    })
}

/// Samples one client's heterogeneous dataset.
///
/// The client's generator decides, in order: which classes are dropped,
/// which retained class is dominant, then the train, validation, and test
/// draws (classes ascending within each split). All randomness comes from
/// `client_seed`, so the same arguments always reproduce the same dataset.
pub fn sample_client(
    task: &TaskSpec,
    client_id: usize,
    client_seed: u64,
    cfg: &SamplerConfig,
) -> Result<ClientDataset> {
    cfg.validate()?;
    let classes = task.num_classes();
    let num_dropped = ((classes as f64 * cfg.drop_frac).round() as usize).min(classes);
    let retained_count = classes - num_dropped;
    if retained_count < 2 {
        return Err(Error::InvalidConfig(format!(
            "dropping {num_dropped} of {classes} classes leaves fewer than 2"
        )));
    }
    let few = cfg.few_shot_count();
    let dominant_count = cfg.dominant_count();
    if few == 0 || dominant_count == 0 {
        return Err(Error::InvalidConfig(
            "sampler fractions yield zero training samples for a class".into(),
        ));
    }

    let mut rng = seed::rng(seed::stream(client_seed, "client.sampler"));
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);
    let mut retained: Vec<usize> = order[num_dropped..].to_vec();
    retained.sort_unstable();
    let dominant_class = retained[rng.random_range(0..retained.len())];

    let train_counts: Vec<(usize, usize)> = retained
        .iter()
        .map(|&class| {
            let count = if class == dominant_class {
                dominant_count
            } else {
                few
            };
            (class, count)
        })
        .collect();
    let uniform = |per_class: usize| -> Vec<(usize, usize)> {
        retained.iter().map(|&class| (class, per_class)).collect()
    };

    let train = draw_split(task, &mut rng, &train_counts)?;
    let validation = draw_split(task, &mut rng, &uniform(cfg.val_per_class))?;
    let test = draw_split(task, &mut rng, &uniform(cfg.test_per_class))?;

    ClientDataset::new(client_id, retained, dominant_class, train, validation, test)
}

/// Draws `count` Gaussian samples around each listed class mean.
fn draw_split(
    task: &TaskSpec,
    rng: &mut impl Rng,
    class_counts: &[(usize, usize)],
) -> Result<Batch> {
    let total: usize = class_counts.iter().map(|&(_, count)| count).sum();
    let dim = task.input_dim();
    let mut features = Array2::<f64>::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for &(class, count) in class_counts {
        let mean = task.class_mean(class);
        for _ in 0..count {
            for (j, slot) in features.row_mut(row).iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *slot = mean[j] + task.noise_sigma() * noise;
            }
            labels.push(class);
            row += 1;
        }
    }
    Batch::new(features, labels)
}

/// Builds the full federation: client `k` gets ID `k` and a seed derived
/// from `base_seed` and `k`.
pub fn make_federation_data(
    task: &TaskSpec,
    num_clients: usize,
    base_seed: u64,
    cfg: &SamplerConfig,
) -> Result<Vec<ClientDataset>> {
    if num_clients < 2 {
        return Err(Error::InvalidConfig(format!(
            "a federation needs at least 2 clients, got {num_clients}"
        )));
    }
    (0..num_clients)
        .map(|k| sample_client(task, k, seed::mix(base_seed, k as u64), cfg))
        .collect()
}

/// Samples a dataset for a client joining an existing federation of
/// `num_existing` clients. The newcomer takes the next free ID and the same
/// seed derivation, so its data follows exactly the same distribution rules
/// as the founders'.
pub fn make_new_client(
    task: &TaskSpec,
    num_existing: usize,
    base_seed: u64,
    cfg: &SamplerConfig,
) -> Result<ClientDataset> {
    sample_client(
        task,
        num_existing,
        seed::mix(base_seed, num_existing as u64),
        cfg,
    )
}

/// Magic first line of the dataset archive format.
const DATA_FORMAT_HEADER: &str = "dp2fl-data v1";

/// Names used in the `split` column, in on-disk row order per client.
const SPLIT_NAMES: [&str; 3] = ["train", "validation", "test"];

/// Serializes datasets to the versioned CSV archive format.
///
/// Line 1 is the format marker, line 2 the column header
/// `split,client_id,label,v0,...`; every following line is one sample.
/// Floats use the shortest representation that round-trips exactly.
pub fn datasets_to_csv(datasets: &[ClientDataset]) -> Result<String> {
    let dim = match datasets.first() {
        Some(ds) => ds.train().input_dim(),
        None => {
            return Err(Error::InvalidConfig(
                "cannot serialize an empty list of datasets".into(),
            ))
        }
    };
    let mut out = String::new();
    out.push_str(DATA_FORMAT_HEADER);
    out.push('\n');
    out.push_str("split,client_id,label");
    for j in 0..dim {
        out.push_str(&format!(",v{j}"));
    }
    out.push('\n');
    for ds in datasets {
        for (name, batch) in SPLIT_NAMES
            .iter()
            .zip([ds.train(), ds.validation(), ds.test()])
        {
            for i in 0..batch.len() {
                out.push_str(&format!("{name},{},{}", ds.client_id(), batch.labels()[i]));
                for value in batch.feature(i) {
                    out.push_str(&format!(",{value}"));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Writes the CSV archive produced by [`datasets_to_csv`] to a file.
pub fn write_datasets_csv(path: &Path, datasets: &[ClientDataset]) -> Result<()> {
    std::fs::write(path, datasets_to_csv(datasets)?)?;
    Ok(())
}

/// Parses the CSV archive format back into client datasets.
///
/// Present classes are recovered from the labels. The dominant class is
/// inferred as the class with the most training samples (lowest index on
/// ties), which matches the writer whenever the training split is actually
/// skewed.
pub fn datasets_from_csv(text: &str) -> Result<Vec<ClientDataset>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(line) if line.trim_end() == DATA_FORMAT_HEADER => {}
        other => {
            return Err(Error::DataParse(format!(
                "expected header {DATA_FORMAT_HEADER:?}, found {other:?}"
            )))
        }
    }
    let columns = match lines.next() {
        Some(line) => line.trim_end().split(',').count(),
        None => return Err(Error::DataParse("missing column header line".into())),
    };
    if columns < 4 {
        return Err(Error::DataParse(format!(
            "column header must list at least one feature column, got {columns} columns"
        )));
    }
    let dim = columns - 3;

    // One (label, features) row list per split, in file order.
    type SplitRows = [Vec<(usize, Vec<f64>)>; 3];
    let mut rows: BTreeMap<usize, SplitRows> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let display_line = lineno + 3;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(Error::DataParse(format!(
                "line {display_line}: expected {columns} fields, got {}",
                fields.len()
            )));
        }
        let split_index = SPLIT_NAMES
            .iter()
            .position(|name| *name == fields[0])
            .ok_or_else(|| {
                Error::DataParse(format!(
                    "line {display_line}: unknown split {:?}",
                    fields[0]
                ))
            })?;
        let client_id: usize = fields[1].parse().map_err(|_| {
            Error::DataParse(format!(
                "line {display_line}: bad client id {:?}",
                fields[1]
            ))
        })?;
        let label: usize = fields[2].parse().map_err(|_| {
            Error::DataParse(format!("line {display_line}: bad label {:?}", fields[2]))
        })?;
        let mut vector = Vec::with_capacity(dim);
        for field in &fields[3..] {
            let value: f64 = field.parse().map_err(|_| {
                Error::DataParse(format!("line {display_line}: bad feature value {field:?}"))
            })?;
            vector.push(value);
        }
        rows.entry(client_id).or_default()[split_index].push((label, vector));
    }

    let mut datasets = Vec::with_capacity(rows.len());
    for (client_id, splits) in rows {
        let mut batches = Vec::with_capacity(3);
        for (split_index, split_rows) in splits.iter().enumerate() {
            if split_rows.is_empty() {
                return Err(Error::DataParse(format!(
                    "client {client_id} has no {} rows",
                    SPLIT_NAMES[split_index]
                )));
            }
            let mut features = Array2::<f64>::zeros((split_rows.len(), dim));
            let mut labels = Vec::with_capacity(split_rows.len());
            for (i, (label, vector)) in split_rows.iter().enumerate() {
                for (slot, value) in features.row_mut(i).iter_mut().zip(vector) {
                    *slot = *value;
                }
                labels.push(*label);
            }
            batches.push(Batch::new(features, labels)?);
        }
        let test = batches.pop().expect("three splits were pushed");
        let validation = batches.pop().expect("three splits were pushed");
        let train = batches.pop().expect("three splits were pushed");

        let mut present: Vec<usize> = train
            .labels()
            .iter()
            .chain(validation.labels())
            .chain(test.labels())
            .copied()
            .collect();
        present.sort_unstable();
        present.dedup();

        let mut train_counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &label in train.labels() {
            *train_counts.entry(label).or_insert(0) += 1;
        }
        let dominant_class = train_counts
            .iter()
            .max_by_key(|&(class, count)| (*count, std::cmp::Reverse(*class)))
            .map(|(class, _)| *class)
            .expect("training split is non-empty");

        datasets.push(ClientDataset::new(
            client_id,
            present,
            dominant_class,
            train,
            validation,
            test,
        )?);
    }
    Ok(datasets)
}

/// Reads a CSV archive file written by [`write_datasets_csv`].
pub fn read_datasets_csv(path: &Path) -> Result<Vec<ClientDataset>> {
    datasets_from_csv(&std::fs::read_to_string(path)?)
}
