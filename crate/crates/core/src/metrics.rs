//! Evaluation arithmetic: relative gain against baselines, mean rank,
//! gradient interference and fixed-weight extraction.

use serde::{Deserialize, Serialize};

use crate::aggregators::GradientBundle;
use crate::error::{Error, Result};
use crate::numerics::{norm, Simplex};
use crate::weighters::{Convention, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub lower_is_better: bool,
}

impl Metric {
    pub fn new(name: &str, value: f64, lower_is_better: bool) -> Self {
        Metric {
            name: name.to_string(),
            value,
            lower_is_better,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: String,
    pub metrics: Vec<Metric>,
}

/// Metrics of one model, grouped by task.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub tasks: Vec<TaskMetric>,
}

impl TaskMetrics {
    pub fn new(tasks: Vec<TaskMetric>) -> Result<Self> {
        if let Some(t) = tasks.iter().find(|t| t.metrics.is_empty()) {
            return Err(Error::InvalidArgument(format!("task `{}` has no metrics", t.task)));
        }
        Ok(TaskMetrics { tasks })
    }

    /// One metric per task.
    pub fn single(entries: &[(&str, &str, f64, bool)]) -> Self {
        TaskMetrics {
            tasks: entries
                .iter()
                .map(|(task, name, value, lower)| TaskMetric {
                    task: task.to_string(),
                    metrics: vec![Metric::new(name, *value, *lower)],
                })
                .collect(),
        }
    }

    fn aligned_with(&self, other: &TaskMetrics) -> Result<()> {
        let ok = self.tasks.len() == other.tasks.len()
            && self.tasks.iter().zip(&other.tasks).all(|(a, b)| {
                a.task == b.task
                    && a.metrics.len() == b.metrics.len()
                    && a.metrics.iter().zip(&b.metrics).all(|(x, y)| {
                        x.name == y.name && x.lower_is_better == y.lower_is_better
                    })
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("task metrics have different structure".into()))
        }
    }

    /// Element-wise mean of several aligned metric sets.
    pub fn mean(all: &[TaskMetrics]) -> Result<TaskMetrics> {
        let first = all
            .first()
            .ok_or_else(|| Error::InvalidArgument("no metrics to average".into()))?;
        for m in &all[1..] {
            first.aligned_with(m)?;
        }
        let mut out = first.clone();
        let k = all.len() as f64;
        for (ti, t) in out.tasks.iter_mut().enumerate() {
            for (mi, m) in t.metrics.iter_mut().enumerate() {
                m.value = all.iter().map(|a| a.tasks[ti].metrics[mi].value).sum::<f64>() / k;
            }
        }
        Ok(out)
    }
}

/// Mean relative gain over tasks and metrics, in percent; positive is better.
pub fn delta_mtm(smto: &TaskMetrics, baseline: &TaskMetrics) -> Result<f64> {
    smto.aligned_with(baseline)?;
    if smto.tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let mut total = 0.0;
    for (s, b) in smto.tasks.iter().zip(&baseline.tasks) {
        let mut task_sum = 0.0;
        for (ms, mb) in s.metrics.iter().zip(&b.metrics) {
            if mb.value == 0.0 {
                return Err(Error::ZeroBaseline {
                    task: b.task.clone(),
                    metric: mb.name.clone(),
                });
            }
            let sign = if mb.lower_is_better { -1.0 } else { 1.0 };
            task_sum += sign * (ms.value - mb.value) / mb.value;
        }
        total += task_sum / s.metrics.len() as f64;
    }
    Ok(100.0 * total / smto.tasks.len() as f64)
}

/// Ranks with ties sharing the average of the positions they occupy;
/// rank 1 is the best score.
pub fn average_ranks(values: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| if lower_is_better { values[i] } else { -values[i] };
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && key(order[j + 1]) == key(order[i]) {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mean rank of every SMTO over tasks and metrics.
pub fn mean_rank(all: &[TaskMetrics]) -> Result<Vec<f64>> {
    let first = all
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean rank needs at least one method".into()))?;
    for m in &all[1..] {
        first.aligned_with(m)?;
    }
    let n_tasks = first.tasks.len();
    if n_tasks == 0 {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let mut mr = vec![0.0; all.len()];
    for ti in 0..n_tasks {
        let n_metrics = first.tasks[ti].metrics.len();
        for mi in 0..n_metrics {
            let vals: Vec<f64> = all.iter().map(|a| a.tasks[ti].metrics[mi].value).collect();
            let ranks = average_ranks(&vals, first.tasks[ti].metrics[mi].lower_is_better);
            for (m, r) in mr.iter_mut().zip(ranks) {
                *m += r / n_metrics as f64;
            }
        }
    }
    mr.iter_mut().for_each(|m| *m /= n_tasks as f64);
    Ok(mr)
}

pub const DEGENERATE_MEAN: f64 = 1e-12;

/// Running mean of `mean_i cos(g_i, ḡ)` over a stream of gradient bundles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterferenceMeter {
    sum: f64,
    count: usize,
    pub degenerate: usize,
    pub skipped: usize,
}

impl InterferenceMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one bundle; returns its contribution when it was counted.
    pub fn push(&mut self, bundle: &GradientBundle) -> Option<f64> {
        if bundle.norms().iter().any(|n| *n <= 0.0) {
            self.skipped += 1;
            return None;
        }
        let n = bundle.n_tasks();
        let mean = bundle.combine(&vec![1.0 / n as f64; n]);
        let mn = norm(&mean);
        let value = if mn < DEGENERATE_MEAN {
            self.degenerate += 1;
            0.0
        } else {
            (0..n)
                .map(|i| crate::numerics::dot(bundle.row(i), &mean) / (bundle.norms()[i] * mn))
                .sum::<f64>()
                / n as f64
        };
        self.sum += value;
        self.count += 1;
        Some(value)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Per-step weight vectors grouped by epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightTrace {
    pub smto: String,
    pub seed: u64,
    pub epochs: Vec<Vec<Vec<f64>>>,
}

impl WeightTrace {
    pub fn new(smto: &str, seed: u64) -> Self {
        WeightTrace {
            smto: smto.to_string(),
            seed,
            epochs: Vec::new(),
        }
    }

    pub fn start_epoch(&mut self) {
        self.epochs.push(Vec::new());
    }

    pub fn record(&mut self, weights: Vec<f64>) -> Result<()> {
        if let Some(w) = self.steps().next() {
            if w.len() != weights.len() {
                return Err(Error::Shape("weight trace vectors differ in length".into()));
            }
        }
        if self.epochs.is_empty() {
            self.start_epoch();
        }
        self.epochs.last_mut().expect("epoch started").push(weights);
        Ok(())
    }

    pub fn steps(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.epochs.iter().flatten()
    }

    pub fn n_steps(&self) -> usize {
        self.epochs.iter().map(Vec::len).sum()
    }

    /// Mean weight vector of every non-empty epoch.
    pub fn epoch_means(&self) -> Vec<Vec<f64>> {
        self.epochs
            .iter()
            .filter(|e| !e.is_empty())
            .map(|e| {
                let k = e[0].len();
                (0..k)
                    .map(|i| e.iter().map(|w| w[i]).sum::<f64>() / e.len() as f64)
                    .collect()
            })
            .collect()
    }

    /// Mean weight vector over all steps.
    pub fn mean(&self) -> Option<Vec<f64>> {
        let n = self.n_steps();
        let first = self.steps().next()?;
        let mut m = vec![0.0; first.len()];
        for w in self.steps() {
            m.iter_mut().zip(w).for_each(|(a, b)| *a += b / n as f64);
        }
        Some(m)
    }
}

pub const EMA_BETA: f64 = 0.9;

/// Epoch means smoothed by an EMA (seeded with the first epoch mean, no bias
/// correction); the last value is renormalized to sum one.
pub fn extract_fixed_weights(trace: &WeightTrace, beta: f64) -> Result<WeightVector> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("EMA beta must lie in [0, 1), got {beta}")));
    }
    let ema = ema_of_epoch_means(trace, beta)
        .ok_or_else(|| Error::InvalidArgument("empty weight trace".into()))?;
    let s: f64 = ema.iter().sum();
    if !(s > 0.0) || ema.iter().any(|w| *w < 0.0) {
        return Err(Error::Degenerate(format!("extracted weights {ema:?} are not a positive vector")));
    }
    let w = Simplex::new(ema.iter().map(|e| e / s).collect())?;
    WeightVector::new(w.into_vec(), Convention::SumToOne)
}

/// EMA of the epoch means before renormalization.
pub fn ema_of_epoch_means(trace: &WeightTrace, beta: f64) -> Option<Vec<f64>> {
    let means = trace.epoch_means();
    let mut it = means.into_iter();
    let mut ema = it.next()?;
    for m in it {
        ema.iter_mut()
            .zip(&m)
            .for_each(|(e, x)| *e = beta * *e + (1.0 - beta) * x);
    }
    Some(ema)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_examples() {
        let m = TaskMetrics::single(&[("a", "acc", 0.9, false), ("b", "mse", 0.2, true)]);
        assert_eq!(delta_mtm(&m, &m).unwrap(), 0.0);

        let base = TaskMetrics::single(&[("a", "acc", 100.0, false), ("b", "acc", 100.0, false)]);
        let s = TaskMetrics::single(&[("a", "acc", 100.0 - 1.043, false), ("b", "acc", 100.0 - 16.86, false)]);
        assert!((delta_mtm(&s, &base).unwrap() - (-8.9515)).abs() < 1e-9);

        let base = TaskMetrics::new(vec![
            TaskMetric {
                task: "A".into(),
                metrics: vec![Metric::new("acc", 10.0, false), Metric::new("err", 2.0, true)],
            },
            TaskMetric {
                task: "B".into(),
                metrics: vec![Metric::new("acc", 5.0, false)],
            },
        ])
        .unwrap();
        let mut s = base.clone();
        s.tasks[0].metrics[0].value = 11.0;
        s.tasks[0].metrics[1].value = 1.0;
        assert!((delta_mtm(&s, &base).unwrap() - 15.0).abs() < 1e-12);

        let zero = TaskMetrics::single(&[("a", "acc", 0.0, false)]);
        let err = delta_mtm(&zero, &zero).unwrap_err();
        assert!(matches!(err, Error::ZeroBaseline { ref task, ref metric } if task == "a" && metric == "acc"));
    }

    #[test]
    fn rank_examples() {
        let a = TaskMetrics::single(&[("t", "acc", 0.9, false), ("u", "mse", 0.1, true)]);
        let b = TaskMetrics::single(&[("t", "acc", 0.8, false), ("u", "mse", 0.2, true)]);
        assert_eq!(mean_rank(std::slice::from_ref(&a)).unwrap(), vec![1.0]);
        assert_eq!(mean_rank(&[a.clone(), b.clone()]).unwrap(), vec![1.0, 2.0]);

        let x = TaskMetrics::single(&[("t", "acc", 0.9, false)]);
        let y = TaskMetrics::single(&[("t", "acc", 0.9, false)]);
        let z = TaskMetrics::single(&[("t", "acc", 0.5, false)]);
        assert_eq!(mean_rank(&[x, y, z]).unwrap(), vec![1.5, 1.5, 3.0]);
        assert!(mean_rank(&[a, TaskMetrics::single(&[("t", "acc", 1.0, false)])]).is_err());
    }

    #[test]
    fn interference_examples() {
        let mut m = InterferenceMeter::new();
        m.push(&GradientBundle::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap());
        assert!((m.mean().unwrap() - 1.0).abs() < 1e-15);

        let mut m = InterferenceMeter::new();
        m.push(&GradientBundle::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        assert!((m.mean().unwrap() - 0.5f64.sqrt()).abs() < 1e-15);

        let mut m = InterferenceMeter::new();
        assert_eq!(m.push(&GradientBundle::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap()), Some(0.0));
        assert_eq!(m.degenerate, 1);
        assert_eq!(m.push(&GradientBundle::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()), None);
        assert_eq!(m.skipped, 1);
    }

    #[test]
    fn extraction_examples() {
        let mut t = WeightTrace::new("x", 0);
        for _ in 0..3 {
            t.start_epoch();
            for _ in 0..4 {
                t.record(vec![0.3, 0.7]).unwrap();
            }
        }
        let w = extract_fixed_weights(&t, EMA_BETA).unwrap();
        assert!((w.as_slice()[0] - 0.3).abs() < 1e-12 && (w.as_slice()[1] - 0.7).abs() < 1e-12);

        let mut t = WeightTrace::new("x", 0);
        t.start_epoch();
        t.record(vec![1.0]).unwrap();
        t.start_epoch();
        t.record(vec![0.0]).unwrap();
        assert!((ema_of_epoch_means(&t, 0.9).unwrap()[0] - 0.9).abs() < 1e-15);

        let mut t = WeightTrace::new("x", 0);
        for e in [[0.2, 0.8], [0.6, 0.4]] {
            t.start_epoch();
            t.record(e.to_vec()).unwrap();
        }
        assert_eq!(extract_fixed_weights(&t, 0.0).unwrap().as_slice(), &[0.6, 0.4]);
        assert!(extract_fixed_weights(&WeightTrace::new("x", 0), 0.9).is_err());
    }
}
