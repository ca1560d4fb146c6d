//! Unified multi-task label space, synthetic data generation, CSV ingestion
//! and task-tagged batching.
//!
//! Every task keeps its own local class indices; training and evaluation run
//! over the union of all tasks, with local labels remapped into one global
//! classification space by per-task offsets.

use crate::config::SyntheticSpec;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng, Scalar};
use std::path::Path;

/// Task-to-global class index mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnifiedLabelSpace {
    counts: Vec<usize>,
    offsets: Vec<usize>,
    n_class: usize,
}

/// Merges per-task class counts into one global label space.
pub fn build_label_space(class_counts: &[usize]) -> Result<UnifiedLabelSpace> {
    if class_counts.is_empty() {
        return Err(Error::Config("label space: no tasks".into()));
    }
    if class_counts.iter().any(|&c| c == 0) {
        return Err(Error::Config("label space: class count must be >= 1".into()));
    }
    let mut offsets = Vec::with_capacity(class_counts.len());
    let mut acc = 0;
    for &c in class_counts {
        offsets.push(acc);
        acc += c;
    }
    Ok(UnifiedLabelSpace {
        counts: class_counts.to_vec(),
        offsets,
        n_class: acc,
    })
}

impl UnifiedLabelSpace {
    pub fn n_tasks(&self) -> usize {
        self.counts.len()
    }

    pub fn n_class(&self) -> usize {
        self.n_class
    }

    pub fn class_count(&self, task: usize) -> usize {
        self.counts[task]
    }

    pub fn offset(&self, task: usize) -> usize {
        self.offsets[task]
    }

    pub fn to_global(&self, task: usize, local: usize) -> Result<usize> {
        if task >= self.counts.len() {
            return Err(Error::Config(format!("task id {task} out of range")));
        }
        if local >= self.counts[task] {
            return Err(Error::Config(format!(
                "local label {local} out of range for task {task} ({} classes)",
                self.counts[task]
            )));
        }
        Ok(self.offsets[task] + local)
    }

    pub fn to_local(&self, global: usize) -> Result<(usize, usize)> {
        if global >= self.n_class {
            return Err(Error::Config(format!("global label {global} out of range")));
        }
        // offsets are sorted; find the owning task
        let task = match self.offsets.binary_search(&global) {
            Ok(t) => t,
            Err(ins) => ins - 1,
        };
        Ok((task, global - self.offsets[task]))
    }
}

/// One labeled feature vector, tagged with its task of origin.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub features: Vec<f64>,
    pub global_label: usize,
    pub task_id: usize,
}

/// Merged sample set across all tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TaskSample>,
    pub d_in: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Assembles the selected samples into a feature batch plus labels.
    pub fn gather<S: Scalar>(&self, indices: &[usize]) -> (Matrix<S>, Vec<usize>, Vec<usize>) {
        let mut features = Matrix::zeros(indices.len(), self.d_in);
        let mut labels = Vec::with_capacity(indices.len());
        let mut tasks = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            let s = &self.samples[idx];
            for (dst, &v) in features.row_mut(row).iter_mut().zip(&s.features) {
                *dst = S::from_f64(v);
            }
            labels.push(s.global_label);
            tasks.push(s.task_id);
        }
        (features, labels, tasks)
    }

    pub fn per_task_counts(&self, n_tasks: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n_tasks];
        for s in &self.samples {
            counts[s.task_id] += 1;
        }
        counts
    }
}

/// Gaussian class means at `mean_scale`, per-task noise scales: a benchmark
/// with controllable per-task difficulty. Deterministic per seed; the test
/// split is drawn after the train split from the same stream, so the two
/// never share a sample.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    d_in: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, UnifiedLabelSpace)> {
    generate_synthetic_draw(spec, d_in, seed, 0)
}

/// As [`generate_synthetic`], with an explicit draw index. Class means depend
/// only on `(seed, task)`, so any draw produces a fresh sample set of the
/// same tasks, and one task's sample counts never shift another task's means.
pub fn generate_synthetic_draw(
    spec: &SyntheticSpec,
    d_in: usize,
    seed: u64,
    draw: u64,
) -> Result<(Dataset, Dataset, UnifiedLabelSpace)> {
    let counts: Vec<usize> = spec.tasks.iter().map(|t| t.classes).collect();
    let space = build_label_space(&counts)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (task_id, task) in spec.tasks.iter().enumerate() {
        let mut mean_rng = Rng::substream(seed, &format!("data/means/task{task_id}"));
        let mut sample_rng =
            Rng::substream(seed, &format!("data/samples/task{task_id}/draw{draw}"));
        let means: Vec<Vec<f64>> = (0..task.classes)
            .map(|_| {
                (0..d_in)
                    .map(|_| mean_rng.normal() * spec.mean_scale)
                    .collect()
            })
            .collect();
        for (local, mean) in means.iter().enumerate() {
            let global = space.to_global(task_id, local)?;
            let next = |rng: &mut Rng| TaskSample {
                features: mean
                    .iter()
                    .map(|&m| m + rng.normal() * task.noise)
                    .collect(),
                global_label: global,
                task_id,
            };
            for _ in 0..task.train_per_class {
                train.push(next(&mut sample_rng));
            }
            for _ in 0..task.test_per_class {
                test.push(next(&mut sample_rng));
            }
        }
    }
    Ok((
        Dataset {
            samples: train,
            d_in,
        },
        Dataset {
            samples: test,
            d_in,
        },
        space,
    ))
}

/// Materializes `(train, test, label space)` from a run config's data block,
/// generating synthetic data or loading the configured CSV files.
pub fn load_dataset(
    data: &crate::config::DataConfig,
    d_in: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, UnifiedLabelSpace)> {
    match &data.source {
        crate::config::DataSource::Synthetic(spec) => generate_synthetic(spec, d_in, seed),
        crate::config::DataSource::Csv(spec) => {
            let counts: Vec<usize> = spec.tasks.iter().map(|t| t.classes).collect();
            let space = build_label_space(&counts)?;
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (task_id, task) in spec.tasks.iter().enumerate() {
                train.extend(load_csv(Path::new(&task.train), task_id, &space)?);
                test.extend(load_csv(Path::new(&task.test), task_id, &space)?);
            }
            for s in train.iter().chain(&test) {
                if s.features.len() != d_in {
                    return Err(Error::Config(format!(
                        "csv sample width {} does not match model d_in {d_in}",
                        s.features.len()
                    )));
                }
            }
            Ok((
                Dataset {
                    samples: train,
                    d_in,
                },
                Dataset {
                    samples: test,
                    d_in,
                },
                space,
            ))
        }
    }
}

/// Loads one task's samples from CSV: feature columns then one integer local
/// label column, no header. Labels are remapped into the global space.
pub fn load_csv(path: &Path, task_id: usize, space: &UnifiedLabelSpace) -> Result<Vec<TaskSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Parse(format!(
                "{}: line {}: expected features and a label column",
                path.display(),
                lineno + 1
            )));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Parse(format!(
                    "{}: line {}: {} columns, expected {}",
                    path.display(),
                    lineno + 1,
                    fields.len(),
                    w
                )))
            }
            _ => {}
        }
        let (label_field, feature_fields) = fields.split_last().expect("len >= 2");
        let features = feature_fields
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| {
                    Error::Parse(format!(
                        "{}: line {}: bad feature `{f}`: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let local = label_field.trim().parse::<i64>().map_err(|e| {
            Error::Parse(format!(
                "{}: line {}: bad label `{label_field}`: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if local < 0 || local as usize >= space.class_count(task_id) {
            return Err(Error::Config(format!(
                "{}: line {}: label {local} out of range for task {task_id} ({} classes)",
                path.display(),
                lineno + 1,
                space.class_count(task_id)
            )));
        }
        out.push(TaskSample {
            features,
            global_label: space.to_global(task_id, local as usize)?,
            task_id,
        });
    }
    Ok(out)
}

/// One epoch of mixed-task batches: a seeded permutation of the merged set,
/// chunked to `batch_size`. Every sample appears exactly once per epoch.
pub fn batch_iter(n_samples: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = Rng::substream(seed, &format!("shuffle/{epoch}"));
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_benchmark, SyntheticTask};
    use std::io::Write;

    #[test]
    fn label_space_prefix_sums() {
        let space = build_label_space(&[3, 2]).unwrap();
        assert_eq!(space.offset(0), 0);
        assert_eq!(space.offset(1), 3);
        assert_eq!(space.n_class(), 5);
    }

    #[test]
    fn label_round_trip() {
        let space = build_label_space(&[3, 2]).unwrap();
        assert_eq!(space.to_global(1, 1).unwrap(), 4);
        assert_eq!(space.to_local(4).unwrap(), (1, 1));
        for g in 0..space.n_class() {
            let (t, l) = space.to_local(g).unwrap();
            assert_eq!(space.to_global(t, l).unwrap(), g);
        }
    }

    #[test]
    fn single_task_is_identity() {
        let space = build_label_space(&[7]).unwrap();
        for c in 0..7 {
            assert_eq!(space.to_global(0, c).unwrap(), c);
        }
    }

    #[test]
    fn empty_task_list_errors() {
        assert!(build_label_space(&[]).is_err());
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = default_benchmark();
        let a = generate_synthetic(&spec, 16, 7).unwrap();
        let b = generate_synthetic(&spec, 16, 7).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    fn nearest_mean_accuracy(train: &Dataset, test: &Dataset, n_class: usize) -> f64 {
        // Oracle classifier: class means from train, nearest mean on test.
        let d = train.d_in;
        let mut sums = vec![vec![0.0f64; d]; n_class];
        let mut counts = vec![0usize; n_class];
        for s in &train.samples {
            counts[s.global_label] += 1;
            for (acc, &v) in sums[s.global_label].iter_mut().zip(&s.features) {
                *acc += v;
            }
        }
        for (sum, &c) in sums.iter_mut().zip(&counts) {
            if c > 0 {
                for v in sum.iter_mut() {
                    *v /= c as f64;
                }
            }
        }
        let mut correct = 0usize;
        for s in &test.samples {
            let mut best = (f64::INFINITY, 0usize);
            for (c, mean) in sums.iter().enumerate() {
                if counts[c] == 0 {
                    continue;
                }
                let dist: f64 = mean
                    .iter()
                    .zip(&s.features)
                    .map(|(m, v)| (m - v) * (m - v))
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if best.1 == s.global_label {
                correct += 1;
            }
        }
        correct as f64 / test.samples.len() as f64
    }

    #[test]
    fn vanishing_noise_is_perfectly_classifiable() {
        let spec = SyntheticSpec {
            tasks: vec![SyntheticTask {
                classes: 5,
                train_per_class: 10,
                test_per_class: 10,
                noise: 1e-9,
            }],
            mean_scale: 1.0,
        };
        let (train, test, space) = generate_synthetic(&spec, 8, 3).unwrap();
        assert_eq!(nearest_mean_accuracy(&train, &test, space.n_class()), 1.0);
    }

    #[test]
    fn noisier_task_is_harder_for_nearest_mean() {
        for seed in 0..5 {
            let spec = SyntheticSpec {
                tasks: vec![
                    SyntheticTask {
                        classes: 4,
                        train_per_class: 20,
                        test_per_class: 50,
                        noise: 0.1,
                    },
                    SyntheticTask {
                        classes: 4,
                        train_per_class: 20,
                        test_per_class: 50,
                        noise: 2.0,
                    },
                ],
                mean_scale: 1.0,
            };
            let (train, test, space) = generate_synthetic(&spec, 8, seed).unwrap();
            let acc_task = |task: usize| {
                let sub = Dataset {
                    samples: test
                        .samples
                        .iter()
                        .filter(|s| s.task_id == task)
                        .cloned()
                        .collect(),
                    d_in: test.d_in,
                };
                nearest_mean_accuracy(&train, &sub, space.n_class())
            };
            assert!(
                acc_task(0) > acc_task(1),
                "seed {seed}: {} vs {}",
                acc_task(0),
                acc_task(1)
            );
        }
    }

    #[test]
    fn class_means_are_pairwise_distinct() {
        let spec = default_benchmark();
        let (train, _, space) = generate_synthetic(&spec, 32, 42).unwrap();
        let mut means = vec![vec![0.0f64; 32]; space.n_class()];
        let mut counts = vec![0usize; space.n_class()];
        for s in &train.samples {
            counts[s.global_label] += 1;
            for (m, &v) in means[s.global_label].iter_mut().zip(&s.features) {
                *m += v;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let dist: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(dist.sqrt() > 0.1, "classes {i} and {j} too close");
            }
        }
    }

    fn write_temp_csv(content: &str) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!(
            "emtal-csv-test-{}-{}.csv",
            std::process::id(),
            content.len()
        ));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn csv_well_formed() {
        let path = write_temp_csv("1.0,2.0,0\n-0.5,3.25,1\n");
        let space = build_label_space(&[3, 2]).unwrap();
        let samples = load_csv(&path, 1, &space).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].features, vec![1.0, 2.0]);
        assert_eq!(samples[0].global_label, 3);
        assert_eq!(samples[1].global_label, 4);
    }

    #[test]
    fn csv_label_at_class_count_is_range_error() {
        let path = write_temp_csv("1.0,2.0,2\n");
        let space = build_label_space(&[3, 2]).unwrap();
        let err = load_csv(&path, 1, &space).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn csv_empty_file_is_empty_list() {
        let path = write_temp_csv("");
        let space = build_label_space(&[2]).unwrap();
        let samples = load_csv(&path, 0, &space).unwrap();
        std::fs::remove_file(&path).ok();
        assert!(samples.is_empty());
    }

    #[test]
    fn csv_parse_error_names_line() {
        let path = write_temp_csv("1.0,2.0,0\noops,2.0,1\n");
        let space = build_label_space(&[2]).unwrap();
        let err = load_csv(&path, 0, &space).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn batches_partition_the_epoch() {
        let batches = batch_iter(10, 3, 5, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_is_seeded() {
        assert_eq!(batch_iter(20, 4, 9, 3), batch_iter(20, 4, 9, 3));
        assert_ne!(batch_iter(20, 4, 9, 3), batch_iter(20, 4, 9, 4));
    }
}
