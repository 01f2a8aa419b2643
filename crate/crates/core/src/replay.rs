//! Frequency-driven replay: empirical per-class occurrence counting, a
//! passband selection rule, per-class sample stores with decaying renewal,
//! balanced oversampling, a budget-matched random baseline, and compute
//! accounting.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::learner::{NamedTensor, TrainingSet};
use crate::num::Scalar;

pub const DEFAULT_CAPACITY: usize = 200;
/// Renewal never drops below capacity / RENEWAL_FLOOR_DIVISOR samples.
pub const RENEWAL_FLOOR_DIVISOR: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyReplayConfig {
    pub nu_low: f64,
    pub nu_high: f64,
    pub tau: u64,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Whether a selection counts as an occurrence of the selected class.
    #[serde(default = "default_true")]
    pub selection_increments: bool,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

fn default_true() -> bool {
    true
}

impl FrequencyReplayConfig {
    pub fn new(nu_low: f64, nu_high: f64, tau: u64) -> Self {
        Self {
            nu_low,
            nu_high,
            tau,
            capacity: DEFAULT_CAPACITY,
            selection_increments: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.nu_low && self.nu_low <= self.nu_high && self.nu_high <= 1.0) {
            return Err(invalid(format!(
                "passband [{}, {}] must satisfy 0 <= low <= high <= 1",
                self.nu_low, self.nu_high
            )));
        }
        if self.capacity == 0 {
            return Err(invalid("per-class capacity must be >= 1"));
        }
        Ok(())
    }
}

/// Number of stored samples replaced on the `o`-th visit of a class:
/// max(ceil(n/o), ceil(n/20)), capped at n.
pub fn renewal_count(n: usize, o: usize) -> Result<usize> {
    if o == 0 {
        return Err(invalid("occurrence index starts at 1"));
    }
    Ok(n.div_ceil(o).max(n.div_ceil(RENEWAL_FLOOR_DIVISOR)).min(n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T> {
    config: FrequencyReplayConfig,
    stores: BTreeMap<usize, Vec<Vec<T>>>,
    counts: BTreeMap<usize, u64>,
    occurrences: BTreeMap<usize, u64>,
    nb_batch: u64,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(config: FrequencyReplayConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            stores: BTreeMap::new(),
            counts: BTreeMap::new(),
            occurrences: BTreeMap::new(),
            nb_batch: 0,
        })
    }

    pub fn config(&self) -> &FrequencyReplayConfig {
        &self.config
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn nb_batch(&self) -> u64 {
        self.nb_batch
    }

    /// Empirical occurrence counts (the `C_dict` of the selection rule).
    pub fn counts(&self) -> &BTreeMap<usize, u64> {
        &self.counts
    }

    pub fn occurrences(&self, class: usize) -> u64 {
        self.occurrences.get(&class).copied().unwrap_or(0)
    }

    pub fn store(&self, class: usize) -> Option<&[Vec<T>]> {
        self.stores.get(&class).map(Vec::as_slice)
    }

    pub fn stored_classes(&self) -> Vec<usize> {
        self.stores
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn total_stored(&self) -> usize {
        self.stores.values().map(Vec::len).sum()
    }

    /// One call per task: counts the current classes, then selects every
    /// known absent class with count > tau and count / nb_batch inside the
    /// passband. Only empirical counts are consulted.
    pub fn select_replay_classes(&mut self, current: &[usize]) -> Vec<usize> {
        self.nb_batch += 1;
        for &c in current {
            *self.counts.entry(c).or_insert(0) += 1;
        }
        let mut selected = Vec::new();
        for (&class, count) in self.counts.iter_mut() {
            if current.contains(&class) {
                continue;
            }
            let freq = *count as f64 / self.nb_batch as f64;
            if *count > self.config.tau && self.config.nu_low <= freq && freq <= self.config.nu_high {
                selected.push(class);
                if self.config.selection_increments {
                    *count += 1;
                }
            }
        }
        selected
    }

    /// Records a visit of `class` and refreshes its store from `fresh`: the
    /// store is topped up to capacity first, otherwise renewal_count(n, o)
    /// uniformly chosen slots are overwritten by distinct fresh samples.
    pub fn renew_class_store<R: Rng + ?Sized>(&mut self, class: usize, fresh: &[&[T]], rng: &mut R) -> Result<usize> {
        let o = {
            let o = self.occurrences.entry(class).or_insert(0);
            *o += 1;
            *o as usize
        };
        let n = self.config.capacity;
        let store = self.stores.entry(class).or_default();
        if let (Some(first), Some(have)) = (fresh.first(), store.first()) {
            if first.len() != have.len() {
                return Err(Error::ShapeMismatch(format!(
                    "fresh sample width {} does not match stored width {}",
                    first.len(),
                    have.len()
                )));
            }
        }
        if fresh.is_empty() {
            return Ok(0);
        }
        if store.len() < n {
            let k = (n - store.len()).min(fresh.len());
            for i in sample(rng, fresh.len(), k) {
                store.push(fresh[i].to_vec());
            }
            return Ok(k);
        }
        let k = renewal_count(n, o)?.min(fresh.len());
        let slots = sample(rng, store.len(), k);
        let picks = sample(rng, fresh.len(), k);
        for (slot, pick) in slots.into_iter().zip(picks) {
            store[slot] = fresh[pick].to_vec();
        }
        Ok(k)
    }

    /// Renews the store of every class occurring in `task`.
    pub fn observe_task<R: Rng + ?Sized>(&mut self, task: &TrainingSet<T>, rng: &mut R) -> Result<()> {
        for class in task.classes() {
            let rows: Vec<&[T]> = task
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == class)
                .map(|(i, _)| task.inputs.row(i).to_slice().expect("training rows are contiguous"))
                .collect();
            self.renew_class_store(class, &rows, rng)?;
        }
        Ok(())
    }

    /// Appends the stores of `replay` to `task`, repeating each store with
    /// wraparound until it contributes round(len / task classes) samples.
    pub fn merge_with_oversampling(&self, task: &TrainingSet<T>, replay: &[usize]) -> Result<TrainingSet<T>> {
        if replay.is_empty() {
            return Ok(task.clone());
        }
        let task_classes = task.classes().len();
        if task_classes == 0 {
            return Err(Error::Insufficient("empty task".into()));
        }
        let target = (task.len() as f64 / task_classes as f64).round() as usize;
        let dim = task.inputs.ncols();
        let rows = task.len() + target * replay.len();
        let mut data = Vec::with_capacity(rows * dim);
        data.extend(task.inputs.iter().copied());
        let mut labels = task.labels.clone();
        for &class in replay {
            let store = self
                .stores
                .get(&class)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Insufficient(format!("no stored samples for replayed class {class}")))?;
            for i in 0..target {
                let sample = &store[i % store.len()];
                if sample.len() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "stored sample width {} does not match task width {dim}",
                        sample.len()
                    )));
                }
                data.extend_from_slice(sample);
                labels.push(class);
            }
        }
        let inputs = Array2::from_shape_vec((rows, dim), data).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        TrainingSet::new(inputs, labels)
    }

    pub fn checkpoint(&self) -> BufferCheckpoint {
        let stores = self
            .stores
            .iter()
            .map(|(c, s)| NamedTensor {
                name: format!("store.{c}"),
                shape: vec![s.len(), s.first().map_or(0, Vec::len)],
                data: s.iter().flatten().map(|x| x.as_f64()).collect(),
            })
            .collect();
        BufferCheckpoint {
            config: self.config.clone(),
            stores,
            counts: self.counts.clone(),
            occurrences: self.occurrences.clone(),
            nb_batch: self.nb_batch,
        }
    }

    pub fn from_checkpoint(ck: &BufferCheckpoint) -> Result<Self> {
        let mut buf = Self::new(ck.config.clone())?;
        for tensor in &ck.stores {
            let class: usize = tensor
                .name
                .strip_prefix("store.")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| invalid(format!("bad store tensor name {}", tensor.name)))?;
            let (len, dim) = match tensor.shape[..] {
                [len, dim] if len * dim == tensor.data.len() && len <= buf.config.capacity => (len, dim),
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "store tensor {} has shape {:?}",
                        tensor.name, tensor.shape
                    )))
                }
            };
            let rows = (0..len)
                .map(|i| tensor.data[i * dim..(i + 1) * dim].iter().map(|&x| T::of(x)).collect())
                .collect();
            buf.stores.insert(class, rows);
        }
        buf.counts = ck.counts.clone();
        buf.occurrences = ck.occurrences.clone();
        buf.nb_batch = ck.nb_batch;
        Ok(buf)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferCheckpoint {
    pub config: FrequencyReplayConfig,
    pub stores: Vec<NamedTensor>,
    pub counts: BTreeMap<usize, u64>,
    pub occurrences: BTreeMap<usize, u64>,
    pub nb_batch: u64,
}

/// Uniformly picks stored classes outside `current`; the number picked
/// averages `ratio * current.len()` per task (floor plus a Bernoulli draw on
/// the fractional part), capped at the number of candidates.
pub fn random_replay_budgeted<T: Scalar, R: Rng + ?Sized>(
    buf: &ReplayBuffer<T>,
    current: &[usize],
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(invalid(format!("budget ratio must be finite and >= 0, got {ratio}")));
    }
    let candidates: Vec<usize> = buf
        .stored_classes()
        .into_iter()
        .filter(|c| !current.contains(c))
        .collect();
    let target = ratio * current.len() as f64;
    let mut k = target.floor() as usize;
    if rng.random::<f64>() < target - target.floor() {
        k += 1;
    }
    let k = k.min(candidates.len());
    let mut picked: Vec<usize> = sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Class-slot accounting of training compute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLedger {
    pub base_class_slots: u64,
    pub replayed_class_slots: u64,
}

impl ComputeLedger {
    pub fn new(base_class_slots: u64, replayed_class_slots: u64) -> Self {
        Self {
            base_class_slots,
            replayed_class_slots,
        }
    }

    pub fn record(&mut self, task_classes: usize, replayed: usize) {
        self.base_class_slots += task_classes as u64;
        self.replayed_class_slots += replayed as u64;
    }

    /// (base + replayed) / base.
    pub fn overhead(&self) -> Result<f64> {
        if self.base_class_slots == 0 {
            return Err(Error::Domain("compute overhead with zero base slots".into()));
        }
        Ok((self.base_class_slots + self.replayed_class_slots) as f64 / self.base_class_slots as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn renewal_examples() {
        assert_eq!(renewal_count(200, 5).unwrap(), 40);
        assert_eq!(renewal_count(200, 50).unwrap(), 10);
        assert_eq!(renewal_count(200, 1).unwrap(), 200);
        assert_eq!(renewal_count(7, 3).unwrap(), 3);
        assert!(renewal_count(200, 0).is_err());
    }

    #[test]
    fn overhead_examples() {
        assert_eq!(ComputeLedger::new(25000, 5320).overhead().unwrap(), 1.2128);
        assert_eq!(ComputeLedger::new(25000, 193445).overhead().unwrap(), 8.7378);
        assert_eq!(ComputeLedger::new(10, 0).overhead().unwrap(), 1.0);
        assert!(ComputeLedger::default().overhead().is_err());
    }

    #[test]
    fn frequent_class_not_selected() {
        let mut buf = ReplayBuffer::<f32>::new(FrequencyReplayConfig::new(0.01, 0.1, 0)).unwrap();
        for t in 0..10 {
            let cur: &[usize] = if t % 3 == 0 && t < 9 { &[0] } else { &[1] };
            buf.select_replay_classes(cur);
        }
        assert_eq!(buf.counts()[&0], 3);
        assert!(buf.select_replay_classes(&[1]).is_empty());
    }

    #[test]
    fn strict_threshold_then_increment() {
        let mut buf = ReplayBuffer::<f32>::new(FrequencyReplayConfig::new(0.01, 0.1, 3)).unwrap();
        buf.counts.insert(7, 3);
        buf.nb_batch = 59;
        assert!(buf.select_replay_classes(&[1]).is_empty());
        buf.counts.insert(7, 4);
        assert_eq!(buf.select_replay_classes(&[1]), vec![7]);
        assert_eq!(buf.counts()[&7], 5);

        let mut cfg = FrequencyReplayConfig::new(0.01, 0.1, 3);
        cfg.selection_increments = false;
        let mut plain = ReplayBuffer::<f32>::new(cfg).unwrap();
        plain.counts.insert(7, 4);
        plain.nb_batch = 59;
        assert_eq!(plain.select_replay_classes(&[1]), vec![7]);
        assert_eq!(plain.counts()[&7], 4);
    }

    #[test]
    fn store_fill_and_renew() {
        let mut cfg = FrequencyReplayConfig::new(0.0, 1.0, 0);
        cfg.capacity = 20;
        let mut buf = ReplayBuffer::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let old: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = old.iter().map(Vec::as_slice).collect();
        assert_eq!(buf.renew_class_store(3, &refs, &mut rng).unwrap(), 20);
        assert_eq!(buf.store(3).unwrap().len(), 20);
        let new: Vec<Vec<f64>> = (0..30).map(|i| vec![100.0 + i as f64]).collect();
        let refs: Vec<&[f64]> = new.iter().map(Vec::as_slice).collect();
        assert_eq!(buf.renew_class_store(3, &refs, &mut rng).unwrap(), 10);
        let renewed = buf.store(3).unwrap().iter().filter(|s| s[0] >= 100.0).count();
        assert_eq!(renewed, 10);
        assert_eq!(buf.occurrences(3), 2);
    }

    #[test]
    fn oversampling_balances() {
        let mut cfg = FrequencyReplayConfig::new(0.0, 1.0, 0);
        cfg.capacity = 200;
        let mut buf = ReplayBuffer::<f32>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stored: Vec<Vec<f32>> = (0..200).map(|i| vec![i as f32, 0.0]).collect();
        let refs: Vec<&[f32]> = stored.iter().map(Vec::as_slice).collect();
        buf.renew_class_store(9, &refs, &mut rng).unwrap();
        let task = TrainingSet::new(Array2::zeros((1000, 2)), (0..1000).map(|i| i % 2).collect()).unwrap();
        assert_eq!(buf.merge_with_oversampling(&task, &[]).unwrap(), task);
        let merged = buf.merge_with_oversampling(&task, &[9]).unwrap();
        assert_eq!(merged.len(), 1500);
        assert_eq!(merged.labels.iter().filter(|&&y| y == 9).count(), 500);
        assert!(buf.merge_with_oversampling(&task, &[4]).is_err());
    }

    #[test]
    fn budgeted_random_replay() {
        let mut buf = ReplayBuffer::<f32>::new(FrequencyReplayConfig::new(0.0, 1.0, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for c in 0..50 {
            buf.renew_class_store(c, &[&[0.0f32][..]], &mut rng).unwrap();
        }
        let current: Vec<usize> = (0..10).collect();
        assert!(random_replay_budgeted(&buf, &current, 0.0, &mut rng)
            .unwrap()
            .is_empty());
        let mut total = 0;
        for _ in 0..1000 {
            let picked = random_replay_budgeted(&buf, &current, 0.2128, &mut rng).unwrap();
            assert!(picked.iter().all(|c| !current.contains(c)));
            total += picked.len();
        }
        assert!((total as f64 - 2128.0).abs() <= 0.05 * 2128.0, "{total}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut buf = ReplayBuffer::<f32>::new(FrequencyReplayConfig::new(0.0, 0.5, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        buf.renew_class_store(2, &[&[1.0f32, 2.0][..], &[3.0, 4.0][..]], &mut rng)
            .unwrap();
        buf.select_replay_classes(&[2]);
        buf.select_replay_classes(&[5]);
        let json = serde_json::to_string(&buf.checkpoint()).unwrap();
        let back: BufferCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(ReplayBuffer::<f32>::from_checkpoint(&back).unwrap(), buf);
    }
}
