//! Non-i.i.d. task streams.
//!
//! A class-incremental (CIL) stream is a sequence of tasks with pairwise
//! disjoint label sets, each carrying its own held-out test split. A task-free
//! (TFCL) stream is the same data re-chunked into fixed-size micro-tasks that
//! carry no task identity. The original test splits travel alongside a TFCL
//! stream as [`Holdout`]s for the evaluator only; trainers never read them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    Cil,
    Tfcl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub label_set: BTreeSet<u32>,
}

impl Task {
    /// Builds a task whose label set is the labels present in `train` and `test`.
    pub fn from_samples(train: Vec<Sample>, test: Vec<Sample>) -> Self {
        let label_set = train.iter().chain(&test).map(|s| s.label).collect();
        Task {
            train,
            test,
            label_set,
        }
    }
}

/// Test split of an original task, kept for evaluating TFCL runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Holdout {
    pub test: Vec<Sample>,
    /// Index of the first micro-task that contains this task's training data.
    pub arrival: usize,
    /// Index of the last micro-task that contains this task's training data.
    pub completion: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    mode: StreamMode,
    dim: usize,
    class_count: usize,
    holdouts: Vec<Holdout>,
}

impl TaskStream {
    /// Validates and assembles a class-incremental stream.
    pub fn cil(tasks: Vec<Task>, dim: usize, class_count: usize) -> Result<Self> {
        let stream = TaskStream {
            tasks,
            mode: StreamMode::Cil,
            dim,
            class_count,
            holdouts: Vec::new(),
        };
        stream.validate()?;
        Ok(stream)
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Validation("stream has no tasks".into()));
        }
        let mut owner: BTreeMap<u32, usize> = BTreeMap::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for s in task.train.iter().chain(&task.test) {
                if s.features.len() != self.dim {
                    return Err(Error::Validation(format!(
                        "task {} has a sample with {} features, stream dimension is {}",
                        t + 1,
                        s.features.len(),
                        self.dim
                    )));
                }
                if !task.label_set.contains(&s.label) {
                    return Err(Error::Validation(format!(
                        "task {} sample label {} not in its label set",
                        t + 1,
                        s.label
                    )));
                }
            }
            if self.mode == StreamMode::Cil {
                if task.train.is_empty() {
                    return Err(Error::Validation(format!(
                        "task {} has no training data",
                        t + 1
                    )));
                }
                for &label in &task.label_set {
                    if let Some(prev) = owner.insert(label, t) {
                        return Err(Error::Validation(format!(
                            "label {label} appears in tasks {} and {}: class-incremental label spaces must be disjoint",
                            prev + 1,
                            t + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn mode(&self) -> StreamMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Evaluation splits of a TFCL stream (empty for CIL streams, whose tasks carry their own).
    pub fn holdouts(&self) -> &[Holdout] {
        &self.holdouts
    }

    /// Re-chunks a CIL stream into micro-tasks of `batch_size` samples.
    ///
    /// Training data is concatenated in task order and cut into consecutive
    /// chunks; the final chunk may be shorter. Micro-tasks carry no test data.
    pub fn to_tfcl(&self, batch_size: usize) -> Result<TaskStream> {
        if self.mode != StreamMode::Cil {
            return Err(Error::config("to_tfcl expects a class-incremental stream"));
        }
        let total: usize = self.tasks.iter().map(|t| t.train.len()).sum();
        if batch_size == 0 || batch_size > total {
            return Err(Error::config(format!(
                "micro-task size {batch_size} must be in 1..={total}"
            )));
        }
        let mut holdouts = Vec::with_capacity(self.tasks.len());
        let mut offset = 0usize;
        for task in &self.tasks {
            let start = offset;
            offset += task.train.len();
            holdouts.push(Holdout {
                test: task.test.clone(),
                arrival: start / batch_size,
                completion: (offset - 1) / batch_size,
            });
        }
        let all: Vec<Sample> = self
            .tasks
            .iter()
            .flat_map(|t| t.train.iter().cloned())
            .collect();
        let tasks = all
            .chunks(batch_size)
            .map(|chunk| Task::from_samples(chunk.to_vec(), Vec::new()))
            .collect();
        Ok(TaskStream {
            tasks,
            mode: StreamMode::Tfcl,
            dim: self.dim,
            class_count: self.class_count,
            holdouts,
        })
    }

    /// All training samples of tasks `0..end` (0-based, exclusive).
    pub fn train_prefix(&self, end: usize) -> Vec<Sample> {
        self.tasks[..end]
            .iter()
            .flat_map(|t| t.train.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    GaussianClusters,
    File,
}

/// Parameters of the synthetic Gaussian-cluster benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub generator: Generator,
    pub dim: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Total class count; defaults to `tasks * classes_per_task` when zero.
    #[serde(default)]
    pub class_count: usize,
    /// Samples generated per class, split into train and test.
    pub samples_per_class: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            generator: Generator::GaussianClusters,
            dim: 20,
            tasks: 5,
            classes_per_task: 2,
            class_count: 10,
            samples_per_class: 300,
            cluster_separation: 6.0,
            noise_sigma: 1.0,
            test_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn effective_class_count(&self) -> usize {
        if self.class_count == 0 {
            self.tasks * self.classes_per_task
        } else {
            self.class_count
        }
    }

    /// Number of test samples per class.
    pub fn test_per_class(&self) -> usize {
        (self.samples_per_class as f64 * self.test_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.effective_class_count();
        if self.dim == 0 || self.tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::config(
                "dim, tasks and classes_per_task must be positive",
            ));
        }
        if self.classes_per_task * self.tasks > k {
            return Err(Error::config(format!(
                "{} tasks x {} classes per task exceeds the class count {k}",
                self.tasks, self.classes_per_task
            )));
        }
        if !(self.cluster_separation > 0.0 && self.noise_sigma > 0.0) {
            return Err(Error::config(
                "cluster_separation and noise_sigma must be positive",
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must lie in (0, 1)"));
        }
        let test = self.test_per_class();
        if test == 0 || test >= self.samples_per_class {
            return Err(Error::config(format!(
                "samples_per_class {} with test_fraction {} leaves an empty train or test split",
                self.samples_per_class, self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Gaussian-cluster class-incremental stream.
///
/// Class means have pairwise distance at least `cluster_separation`: when
/// `K ≤ d` they are the scaled simplex `(sep/√2)·e_k` under a random rotation,
/// otherwise random points on a sphere accepted by rejection. Samples are the
/// class mean plus isotropic noise. Classes are assigned to tasks in label
/// order and each task's training split is shuffled.
pub fn generate_gaussian_cil(config: &StreamConfig) -> Result<TaskStream> {
    config.validate()?;
    if config.generator != Generator::GaussianClusters {
        return Err(Error::config(
            "generate_gaussian_cil needs generator = gaussian-clusters",
        ));
    }
    let k = config.effective_class_count();
    let d = config.dim;
    let mut rng = crate::seed::rng_for(config.seed, crate::seed::Substream::Data);
    let means = class_means(k, d, config.cluster_separation, &mut rng)?;
    let n_test = config.test_per_class();
    let n_train = config.samples_per_class - n_test;

    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..config.classes_per_task {
            let class = t * config.classes_per_task + c;
            let label = class as u32 + 1;
            for i in 0..config.samples_per_class {
                let features = means[class]
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + config.noise_sigma * z
                    })
                    .collect();
                let s = Sample::new(features, label);
                if i < n_train {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
        }
        train.shuffle(&mut rng);
        tasks.push(Task::from_samples(train, test));
    }
    TaskStream::cil(tasks, d, k)
}

fn class_means(k: usize, d: usize, sep: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if k <= d {
        let rotation = random_orthogonal(d, rng);
        let scale = sep / std::f64::consts::SQRT_2;
        return Ok((0..k)
            .map(|c| (0..d).map(|i| scale * rotation[i][c]).collect())
            .collect());
    }
    let mut radius = sep;
    loop {
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut attempts = 0usize;
        while means.len() < k && attempts < 10_000 {
            attempts += 1;
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cand: Vec<f64> = dir.iter().map(|v| radius * v / norm).collect();
            let ok = means.iter().all(|m| {
                m.iter()
                    .zip(&cand)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    >= sep
            });
            if ok {
                means.push(cand);
            }
        }
        if means.len() == k {
            return Ok(means);
        }
        radius *= 1.5;
        if radius > sep * 1e6 {
            return Err(Error::config(
                "could not place class means at the requested separation",
            ));
        }
    }
}

/// Haar-ish random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for c in &cols {
            let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= proj * ci;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    // rows of the returned matrix index coordinates, columns index basis vectors
    (0..d)
        .map(|i| cols.iter().map(|c| c[i]).collect())
        .collect()
}

/// Layout of a stream CSV file: rows `feature_1,…,feature_d,label[,task_id]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub dim: usize,
    pub mode: StreamMode,
    /// Optional companion file with test rows in the same layout.
    pub test_path: Option<PathBuf>,
    /// Micro-task size for TFCL files.
    pub chunk_size: usize,
    /// Class count; inferred as the largest label when `None`.
    pub class_count: Option<usize>,
}

impl CsvSchema {
    pub fn cil(dim: usize) -> Self {
        CsvSchema {
            dim,
            mode: StreamMode::Cil,
            test_path: None,
            chunk_size: 0,
            class_count: None,
        }
    }
}

struct Row {
    sample: Sample,
    task_id: Option<u64>,
}

fn parse_rows(path: &Path, dim: usize) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if line_no == 1 && fields[0].parse::<f64>().is_err() {
            continue; // header
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if fields.len() != dim + 1 && fields.len() != dim + 2 {
            return Err(parse_err(format!(
                "expected {} or {} fields (d = {dim} features, label[, task_id]), found {}",
                dim + 1,
                dim + 2,
                fields.len()
            )));
        }
        match width {
            Some(w) if w != fields.len() => {
                return Err(parse_err(format!(
                    "row has {} fields but earlier rows have {w}",
                    fields.len()
                )));
            }
            _ => width = Some(fields.len()),
        }
        let mut features = Vec::with_capacity(dim);
        for (i, f) in fields[..dim].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(format!("feature {} is not a number: `{f}`", i + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(format!("feature {} is not finite", i + 1)));
            }
            features.push(v);
        }
        let label: u32 = fields[dim].parse().map_err(|_| {
            parse_err(format!(
                "label is not a non-negative integer: `{}`",
                fields[dim]
            ))
        })?;
        let task_id = match fields.get(dim + 1) {
            Some(t) => Some(
                t.parse::<u64>()
                    .map_err(|_| parse_err(format!("task_id is not an integer: `{t}`")))?,
            ),
            None => None,
        };
        rows.push(Row {
            sample: Sample::new(features, label),
            task_id,
        });
    }
    Ok(rows)
}

/// Loads a stream from CSV.
///
/// CIL files group rows by `task_id` (ascending); a companion test file, when
/// given, is grouped the same way. TFCL files ignore any `task_id` column and
/// are cut into micro-tasks of `schema.chunk_size` rows in arrival order.
pub fn load_stream_csv(path: &Path, schema: &CsvSchema) -> Result<TaskStream> {
    if schema.dim == 0 {
        return Err(Error::config("schema dimension must be positive"));
    }
    let rows = parse_rows(path, schema.dim)?;
    if rows.is_empty() {
        return Err(Error::Validation(format!(
            "{} contains no rows",
            path.display()
        )));
    }
    let max_label = rows.iter().map(|r| r.sample.label).max().unwrap_or(0) as usize;
    let class_count = schema.class_count.unwrap_or(max_label);
    match schema.mode {
        StreamMode::Cil => {
            let mut groups: BTreeMap<u64, (Vec<Sample>, Vec<Sample>)> = BTreeMap::new();
            for row in rows {
                let id = row.task_id.ok_or_else(|| {
                    Error::Validation("class-incremental files need a task_id column".into())
                })?;
                groups.entry(id).or_default().0.push(row.sample);
            }
            if let Some(test_path) = &schema.test_path {
                for row in parse_rows(test_path, schema.dim)? {
                    let id = row.task_id.ok_or_else(|| {
                        Error::Validation("test rows need a task_id column".into())
                    })?;
                    groups
                        .get_mut(&id)
                        .ok_or_else(|| {
                            Error::Validation(format!("test rows reference unknown task_id {id}"))
                        })?
                        .1
                        .push(row.sample);
                }
            }
            let tasks = groups
                .into_values()
                .map(|(train, test)| Task::from_samples(train, test))
                .collect();
            TaskStream::cil(tasks, schema.dim, class_count)
        }
        StreamMode::Tfcl => {
            if schema.chunk_size == 0 {
                return Err(Error::config("TFCL files need a positive chunk_size"));
            }
            let samples: Vec<Sample> = rows.into_iter().map(|r| r.sample).collect();
            let tasks: Vec<Task> = samples
                .chunks(schema.chunk_size)
                .map(|c| Task::from_samples(c.to_vec(), Vec::new()))
                .collect();
            let stream = TaskStream {
                tasks,
                mode: StreamMode::Tfcl,
                dim: schema.dim,
                class_count,
                holdouts: Vec::new(),
            };
            stream.validate()?;
            Ok(stream)
        }
    }
}

fn write_rows(out: &mut String, dim: usize, rows: impl Iterator<Item = (usize, Sample)>) {
    let header: Vec<String> = (1..=dim).map(|i| format!("f{i}")).collect();
    let _ = writeln!(out, "{},label,task_id", header.join(","));
    for (task, s) in rows {
        for f in &s.features {
            let _ = write!(out, "{f},");
        }
        let _ = writeln!(out, "{},{}", s.label, task + 1);
    }
}

/// Writes a CIL stream as a training CSV at `train_path` and a test CSV at
/// `test_path`, both readable by [`load_stream_csv`]. Floats use the
/// shortest round-trip representation, so reloading is lossless.
pub fn write_stream_csv(stream: &TaskStream, train_path: &Path, test_path: &Path) -> Result<()> {
    let mut train = String::new();
    write_rows(
        &mut train,
        stream.dim,
        stream
            .tasks
            .iter()
            .enumerate()
            .flat_map(|(t, task)| task.train.iter().cloned().map(move |s| (t, s))),
    );
    let mut test = String::new();
    write_rows(
        &mut test,
        stream.dim,
        stream
            .tasks
            .iter()
            .enumerate()
            .flat_map(|(t, task)| task.test.iter().cloned().map(move |s| (t, s))),
    );
    for (path, body) in [(train_path, train), (test_path, test)] {
        fs::write(path, body).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Uniform draw of `b` samples with replacement from `data`.
pub(crate) fn draw_with_replacement<R: Rng + ?Sized>(
    data: &[Sample],
    b: usize,
    rng: &mut R,
) -> Vec<Sample> {
    (0..b)
        .map(|_| data[rng.random_range(0..data.len())].clone())
        .collect()
}
