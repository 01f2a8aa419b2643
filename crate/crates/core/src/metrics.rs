//! Per-task accuracy logs, IID normalization, local and total forgetting,
//! frequency-band reports, meta-test probing and the accuracy bound curves.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::learner::{accuracy_on, train_task, Network, Optimizer, OptimizerConfig, TrainOptions, TrainingSet};
use crate::num::Scalar;
use crate::stream::expected_class_frequency_nonuniform;

pub const DEFAULT_BAND_EDGES: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
pub const MOVING_AVERAGE_WINDOW: usize = 20;

/// One evaluation after training on task `t`. Counters are cumulative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub t: usize,
    pub overall_acc: f64,
    pub per_class_acc: Vec<f64>,
    pub classes_in_task: Vec<usize>,
    pub gradient_steps: u64,
    pub replayed_classes: Vec<usize>,
    pub cumulative_samples: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    records: Vec<TaskRecord>,
    pub iid_accuracy: Option<f64>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record_at(&self, t: usize) -> Option<&TaskRecord> {
        self.records
            .binary_search_by_key(&t, |r| r.t)
            .ok()
            .map(|i| &self.records[i])
    }

    /// Appends a record; `t` must exceed the previous one and every
    /// accuracy must lie in [0, 1].
    pub fn push(&mut self, record: TaskRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.t <= last.t {
                return Err(invalid(format!("record for task {} after task {}", record.t, last.t)));
            }
            if record.per_class_acc.len() != last.per_class_acc.len() {
                return Err(Error::ShapeMismatch("per-class vector length changed".into()));
            }
        }
        let in_unit = |a: f64| (0.0..=1.0).contains(&a);
        if !in_unit(record.overall_acc) || !record.per_class_acc.iter().all(|&a| in_unit(a)) {
            return Err(invalid("accuracies must lie in [0, 1]"));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn overall_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.overall_acc).collect()
    }

    /// Running total of replayed class slots, per record.
    pub fn replayed_count_cumulative(&self) -> Vec<u64> {
        let mut acc = 0;
        self.records
            .iter()
            .map(|r| {
                acc += r.replayed_classes.len() as u64;
                acc
            })
            .collect()
    }

    /// Rows = evaluated tasks, columns = classes.
    pub fn per_class_matrix_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let row: Vec<String> = r.per_class_acc.iter().map(|a| a.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

fn forgetting_between(prev: &TaskRecord, cur: &TaskRecord) -> Option<f64> {
    let mut prev_classes = prev.classes_in_task.clone();
    let mut cur_classes = cur.classes_in_task.clone();
    prev_classes.sort_unstable();
    cur_classes.sort_unstable();
    if prev_classes == cur_classes {
        return None;
    }
    let n = cur.per_class_acc.len();
    let outside: Vec<usize> = (0..n).filter(|j| !cur_classes.contains(j)).collect();
    if outside.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &j in &outside {
        sum += cur.per_class_acc[j] - prev.per_class_acc[j];
    }
    Some(sum / outside.len() as f64)
}

/// Mean accuracy change from task t-1 to t over classes outside task t.
/// Classes shared by both tasks belong to task t, so they are excluded as
/// well. `None` when both tasks hold the same class set.
pub fn local_forgetting(log: &MetricsLog, t: usize) -> Result<Option<f64>> {
    if t == 0 {
        return Err(invalid("local forgetting needs t >= 1"));
    }
    let cur = log
        .record_at(t)
        .ok_or_else(|| Error::Insufficient(format!("no record for task {t}")))?;
    let prev = log
        .record_at(t - 1)
        .ok_or_else(|| Error::Insufficient(format!("no record for task {}", t - 1)))?;
    Ok(forgetting_between(prev, cur))
}

/// Local forgetting between consecutive records (first entry is `None`).
pub fn local_forgetting_series(log: &MetricsLog) -> Vec<Option<f64>> {
    let recs = log.records();
    let mut out = Vec::with_capacity(recs.len());
    if !recs.is_empty() {
        out.push(None);
    }
    out.extend(recs.windows(2).map(|w| forgetting_between(&w[0], &w[1])));
    out
}

/// Arithmetic mean of every defined local-forgetting value.
pub fn total_forgetting(log: &MetricsLog) -> Result<f64> {
    if log.len() < 2 {
        return Err(Error::Insufficient("total forgetting needs at least 2 records".into()));
    }
    let defined: Vec<f64> = local_forgetting_series(log).into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::Insufficient("no task pair with distinct class sets".into()));
    }
    let mut sum = 0.0;
    for v in &defined {
        sum += v;
    }
    Ok(sum / defined.len() as f64)
}

/// Overall accuracy divided by the IID baseline accuracy.
pub fn normalized_accuracy(log: &MetricsLog) -> Result<Vec<f64>> {
    let iid = log.iid_accuracy.ok_or(Error::MissingBaseline)?;
    if !(iid > 0.0) {
        return Err(Error::MissingBaseline);
    }
    Ok(log.records().iter().map(|r| r.overall_acc / iid).collect())
}

/// Trailing mean over the last `window` values (fewer at the start).
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &v) in series.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub low: f64,
    pub high: f64,
    /// `None` when no class falls in the band.
    pub mean_accuracy: Option<f64>,
    pub classes: Vec<usize>,
}

impl Band {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub bands: Vec<Band>,
    pub task_window: (usize, usize),
}

impl BandReport {
    /// The band whose lower edge equals `low`.
    pub fn band(&self, low: f64) -> Option<&Band> {
        self.bands.iter().find(|b| b.low == low)
    }
}

/// Groups classes by expected per-task frequency into half-open bands
/// [e_i, e_{i+1}) (the last band is closed) and averages their per-class
/// accuracy over records with t in [t0, t1). A band [0, e_0) is prepended
/// when e_0 > 0 so that every class with positive probability is assigned.
pub fn band_report(
    log: &MetricsLog,
    class_probs: &[f64],
    classes_per_task: usize,
    edges: &[f64],
    window: (usize, usize),
) -> Result<BandReport> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) || edges[0] < 0.0 {
        return Err(invalid("band edges must be >= 0 and strictly increasing"));
    }
    let n = class_probs.len();
    let recs: Vec<&TaskRecord> = log
        .records()
        .iter()
        .filter(|r| window.0 <= r.t && r.t < window.1)
        .collect();
    if recs.is_empty() {
        return Err(Error::Insufficient(format!("no records in task window {window:?}")));
    }
    if recs[0].per_class_acc.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} class probabilities for {} logged classes",
            recs[0].per_class_acc.len()
        )));
    }
    let mut bounds: Vec<f64> = Vec::with_capacity(edges.len() + 1);
    if edges[0] > 0.0 {
        bounds.push(0.0);
    }
    bounds.extend_from_slice(edges);
    let mut bands: Vec<Band> = bounds
        .windows(2)
        .map(|w| Band {
            low: w[0],
            high: w[1],
            mean_accuracy: None,
            classes: Vec::new(),
        })
        .collect();
    let last = bands.len() - 1;
    let mut sums = vec![0.0; bands.len()];
    for (class, &p) in class_probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let nu = expected_class_frequency_nonuniform(p, n, classes_per_task)?;
        let slot = bands
            .iter()
            .position(|b| b.low <= nu && nu < b.high)
            .or_else(|| (nu == bands[last].high).then_some(last))
            .ok_or_else(|| Error::Domain(format!("frequency {nu} of class {class} outside the band edges")))?;
        let acc: f64 = recs.iter().map(|r| r.per_class_acc[class]).sum::<f64>() / recs.len() as f64;
        sums[slot] += acc;
        bands[slot].classes.push(class);
    }
    for (band, sum) in bands.iter_mut().zip(sums) {
        if !band.classes.is_empty() {
            band.mean_accuracy = Some(sum / band.classes.len() as f64);
        }
    }
    Ok(BandReport {
        bands,
        task_window: window,
    })
}

/// Reference curves for a class of per-task frequency `nu` after `t` tasks:
/// `plateau * nu` (only the current task is known) and
/// `plateau * (1 - (1 - nu)^t)` (a class is known once it has occurred).
pub fn bound_curves(nu: f64, t: u32, plateau: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&nu) || !(0.0..=1.0).contains(&plateau) {
        return Err(invalid("frequency and plateau must lie in [0, 1]"));
    }
    let lower = plateau * nu;
    let upper = plateau * (1.0 - (1.0 - nu).powi(t.min(i32::MAX as u32) as i32));
    Ok((lower, upper.max(lower)))
}

/// Accuracy on the test samples of `classes`, argmax over those classes only.
pub fn restricted_test_accuracy<T: Scalar>(
    net: &Network<T>,
    test: &LabeledDataset<T>,
    classes: &[usize],
) -> Result<f64> {
    let data = TrainingSet::from_classes(test, classes)?;
    accuracy_on(net, &data, Some(classes))
}

/// Fine-tunes a copy of `net` for one epoch on `interest_train` with a fresh
/// optimizer, then returns its restricted test accuracy on `interest_classes`
/// divided by `first_occurrence_acc`. `net` is left untouched.
#[allow(clippy::too_many_arguments)]
pub fn meta_test_probe<T: Scalar, R: Rng + ?Sized>(
    net: &Network<T>,
    opt_recipe: &OptimizerConfig,
    interest_train: &TrainingSet<T>,
    interest_classes: &[usize],
    test: &LabeledDataset<T>,
    first_occurrence_acc: f64,
    batch_size: usize,
    masking: bool,
    rng: &mut R,
) -> Result<f64> {
    if !(first_occurrence_acc > 0.0) {
        return Err(Error::Domain("first-occurrence accuracy must be > 0".into()));
    }
    let mut copy = net.clone();
    let mut opt = Optimizer::new(opt_recipe.clone(), &copy)?;
    let opts = TrainOptions {
        epochs: 1,
        batch_size,
        masking,
    };
    train_task(&mut copy, &mut opt, interest_train, &opts, rng)?;
    Ok(restricted_test_accuracy(&copy, test, interest_classes)? / first_occurrence_acc)
}

/// Outcome of a paired one-sided sign test of `a > b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// P(X >= wins) for X ~ Binomial(wins + losses, 1/2); ties are dropped.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} paired values",
            a.len(),
            b.len()
        )));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len() - wins - losses;
    let m = wins + losses;
    let mut p = 0.0;
    let mut binom = 1.0f64;
    for k in 0..=m {
        if k > 0 {
            binom = binom * (m - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += binom;
        }
    }
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value: p / 2f64.powi(m as i32),
    })
}
