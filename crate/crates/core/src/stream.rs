//! Task-sequence generation: class distributions, their evolution over time,
//! every task sampler, and the closed-form occurrence quantities of a stream.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::InputTransform;
use crate::error::{invalid, Error, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Largest task enumeration the pair-based samplers will materialize.
pub const MAX_ENUMERATED_TASKS: u64 = 2_000_000;

fn check_sizes(n: usize, c: usize) -> Result<()> {
    if c == 0 || c > n {
        return Err(invalid(format!(
            "classes per task must satisfy 1 <= C <= N, got N={n}, C={c}"
        )));
    }
    Ok(())
}

/// Expected per-task occurrence frequency of one class when `c` of `n`
/// classes are drawn uniformly without replacement.
pub fn expected_class_frequency(n: usize, c: usize) -> Result<f64> {
    check_sizes(n, c)?;
    let miss: f64 = (0..c).map(|i| 1.0 - 1.0 / (n - i) as f64).product();
    Ok(1.0 - miss)
}

/// Expected number of tasks between two occurrences of a class.
pub fn expected_class_gap(n: usize, c: usize) -> Result<f64> {
    Ok(1.0 / expected_class_frequency(n, c)?)
}

/// Per-task occurrence frequency of a class drawn with probability `p`.
///
/// Every factor `1 - p * n / (n - i)` must lie in [0, 1].
pub fn expected_class_frequency_nonuniform(p: f64, n: usize, c: usize) -> Result<f64> {
    check_sizes(n, c)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let mut miss = 1.0;
    for i in 0..c {
        let factor = 1.0 - p * n as f64 / (n - i) as f64;
        if !(0.0..=1.0).contains(&factor) {
            return Err(Error::Domain(format!(
                "probability {p} too large for N={n}, C={c} (factor {factor} at i={i})"
            )));
        }
        miss *= factor;
    }
    Ok(1.0 - miss)
}

/// Number of distinct tasks, binomial(n, c): the expected gap between exact
/// repeats of the same class subset under uniform sampling.
pub fn expected_task_gap(n: usize, c: usize) -> Result<u64> {
    check_sizes(n, c)?;
    let k = c.min(n - c) as u128;
    let n = n as u128;
    let mut acc: u128 = 1;
    for i in 1..=k {
        // acc * (n - k + i) is always divisible by i.
        acc = acc
            .checked_mul(n - k + i)
            .ok_or_else(|| Error::Overflow(format!("binomial({n}, {c})")))?
            / i;
    }
    u64::try_from(acc).map_err(|_| Error::Overflow(format!("binomial({n}, {c}) exceeds u64")))
}

/// KL divergence between a task's data distribution and the IID one.
pub fn kl_to_iid(n: usize, c: usize) -> Result<f64> {
    check_sizes(n, c)?;
    Ok((n as f64 / c as f64).ln())
}

/// Tilted, sharpened class-probability profile before shuffling.
///
/// Starts uniform, subtracts `i / n^2` from entry `i`, renormalizes, raises to
/// the power `d` and renormalizes again. `d = 0` is uniform.
pub fn mixture_profile(n: usize, d: u32) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(invalid("mixture distribution needs N >= 2"));
    }
    let lambda = 1.0 / n as f64;
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 / n as f64 - (1.0 / n as f64) * i as f64 * lambda)
        .collect();
    if let Some(i) = v.iter().position(|&x| x < 0.0) {
        return Err(invalid(format!("negative mixture entry at index {i}")));
    }
    normalize(&mut v)?;
    let exponent = i32::try_from(d).map_err(|_| invalid("entropy decrease too large"))?;
    v.iter_mut().for_each(|x| *x = x.powi(exponent));
    normalize(&mut v)?;
    Ok(v)
}

/// Mixture profile shuffled with `seed`, so each run gets its own imbalance.
pub fn build_mixture_probs(n: usize, d: u32, seed: u64) -> Result<ClassDistribution> {
    let mut probs = mixture_profile(n, d)?;
    probs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ClassDistribution::from_probs(probs)
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let mut total = 0.0;
    for &x in v.iter() {
        total += x;
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numerical(format!("cannot normalize vector with sum {total}")));
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(())
}

/// Divides the probability of each sampled class by `gamma`, then renormalizes.
pub fn apply_gamma_penalty(probs: &mut [f64], sampled: &[usize], gamma: f64) -> Result<()> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(invalid(format!("gamma must be >= 1, got {gamma}")));
    }
    for &c in sampled {
        let p = probs
            .get_mut(c)
            .ok_or_else(|| invalid(format!("class {c} outside distribution")))?;
        *p /= gamma;
    }
    normalize(probs)
}

/// Window of `window` contiguous classes (mod `n`) active at task `t`.
///
/// With `n >= cycle` the window advances `n / cycle` classes per task; with
/// `cycle > n` it advances one class every `cycle / n` tasks. Either way it
/// returns to its start exactly every `cycle` tasks.
pub fn cyclic_window_classes(t: usize, n: usize, window: usize, cycle: usize) -> Result<Vec<usize>> {
    if window == 0 || window > n {
        return Err(invalid(format!("window {window} must be in [1, {n}]")));
    }
    if cycle == 0 {
        return Err(invalid("cycle length must be >= 1"));
    }
    let start = if n >= cycle {
        if !n.is_multiple_of(cycle) {
            return Err(invalid(format!(
                "cycle {cycle} does not divide N={n} into a whole shift step"
            )));
        }
        (t % cycle) * (n / cycle) % n
    } else {
        if !cycle.is_multiple_of(n) {
            return Err(invalid(format!(
                "N={n} does not divide cycle {cycle} into a whole shift period"
            )));
        }
        (t % cycle) / (cycle / n)
    };
    Ok((0..window).map(|i| (start + i) % n).collect())
}

/// How the class distribution changes over the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum Evolution {
    #[default]
    None,
    /// Classes sampled in a task become `gamma` times less likely next task.
    GammaPenalty { gamma: f64 },
    /// Uniform over a window of `window` classes cycling with period `cycle`.
    Cyclic { window: usize, cycle: usize },
    /// From `shift_task` on, only `kept` classes remain.
    Removal { shift_task: usize, kept: Vec<usize> },
    /// `first` classes before `shift_task`, `second` classes afterwards.
    Substitution {
        shift_task: usize,
        first: Vec<usize>,
        second: Vec<usize>,
    },
}

/// Probability of each class entering the next task, plus evolution state.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
    base: Vec<f64>,
    evolution: Evolution,
    task: usize,
}

impl ClassDistribution {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("distribution over zero classes"));
        }
        Self::from_probs(vec![1.0 / n as f64; n])
    }

    pub fn from_probs(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("distribution over zero classes"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        normalize(&mut probs)?;
        Ok(Self {
            base: probs.clone(),
            probs,
            evolution: Evolution::None,
            task: 0,
        })
    }

    pub fn with_evolution(mut self, evolution: Evolution) -> Result<Self> {
        let n = self.num_classes();
        let check_set = |set: &[usize], what: &str| -> Result<()> {
            if set.is_empty() || set.iter().any(|&c| c >= n) {
                return Err(invalid(format!("{what} must be a non-empty subset of [0, {n})")));
            }
            Ok(())
        };
        match &evolution {
            Evolution::None => {}
            Evolution::GammaPenalty { gamma } => {
                if !(*gamma >= 1.0) {
                    return Err(invalid(format!("gamma must be >= 1, got {gamma}")));
                }
            }
            Evolution::Cyclic { window, cycle } => {
                cyclic_window_classes(0, n, *window, *cycle)?;
            }
            Evolution::Removal { kept, .. } => check_set(kept, "kept classes")?,
            Evolution::Substitution { first, second, .. } => {
                check_set(first, "first-period classes")?;
                check_set(second, "second-period classes")?;
                if first.iter().any(|c| second.contains(c)) {
                    return Err(invalid("substitution periods must use disjoint classes"));
                }
            }
        }
        self.evolution = evolution;
        self.prepare(0)?;
        Ok(self)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// The distribution as set at the start of the stream.
    pub fn base_probs(&self) -> &[f64] {
        &self.base
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn evolution(&self) -> &Evolution {
        &self.evolution
    }

    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    fn restricted_base(&self, classes: &[usize]) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.num_classes()];
        for &c in classes {
            p[c] = self.base[c];
        }
        if p.iter().all(|&x| x == 0.0) {
            for &c in classes {
                p[c] = 1.0;
            }
        }
        normalize(&mut p)?;
        Ok(p)
    }

    /// Brings the distribution to its state for task `t`.
    pub fn prepare(&mut self, t: usize) -> Result<()> {
        self.task = t;
        match &self.evolution {
            Evolution::None | Evolution::GammaPenalty { .. } => {}
            Evolution::Cyclic { window, cycle } => {
                let classes = cyclic_window_classes(t, self.num_classes(), *window, *cycle)?;
                let mut p = vec![0.0; self.num_classes()];
                for c in classes {
                    p[c] = 1.0 / *window as f64;
                }
                self.probs = p;
            }
            Evolution::Removal { shift_task, kept } => {
                self.probs = if t < *shift_task {
                    self.base.clone()
                } else {
                    self.restricted_base(&kept.clone())?
                };
            }
            Evolution::Substitution {
                shift_task,
                first,
                second,
            } => {
                let active = if t < *shift_task { first } else { second };
                self.probs = self.restricted_base(&active.clone())?;
            }
        }
        Ok(())
    }

    /// Records the classes sampled for the current task.
    pub fn observe(&mut self, sampled: &[usize]) -> Result<()> {
        if let Evolution::GammaPenalty { gamma } = self.evolution {
            apply_gamma_penalty(&mut self.probs, sampled, gamma)?;
        }
        Ok(())
    }
}

/// Draws `k` distinct classes, each draw proportional to the remaining mass.
/// The result is sorted ascending.
pub fn draw_without_replacement<R: Rng + ?Sized>(probs: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let positive = probs.iter().filter(|&&p| p > 0.0).count();
    if positive < k {
        return Err(Error::Insufficient(format!(
            "only {positive} classes have positive probability, {k} requested"
        )));
    }
    let mut weights = probs.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (c, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(c);
            if u < acc {
                break;
            }
        }
        let c = pick.expect("at least one positive weight remains");
        weights[c] = 0.0;
        out.push(c);
    }
    out.sort_unstable();
    Ok(out)
}

/// All `c`-subsets of `0..n` in lexicographic order.
pub fn enumerate_tasks(n: usize, c: usize) -> Result<Vec<Vec<usize>>> {
    let total = expected_task_gap(n, c)?;
    if total > MAX_ENUMERATED_TASKS {
        return Err(invalid(format!(
            "binomial({n}, {c}) = {total} tasks is too many to enumerate"
        )));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut cur: Vec<usize> = (0..c).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..c).rev().find(|&i| cur[i] < n - c + i) else {
            break;
        };
        cur[i] += 1;
        for j in i + 1..c {
            cur[j] = cur[j - 1] + 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum Sampler {
    /// Draws from the class distribution (uniform unless evolved).
    #[default]
    Uniform,
    /// Draws from a shuffled mixture profile with entropy decrease `d`.
    Mixture { entropy_decrease: u32 },
    /// Cycles through all class pairs in lexicographic order; each class is
    /// replaced by a random class outside the task with probability `flip_p`.
    Structured { flip_p: f64 },
    /// Draws uniformly from a fixed seeded subset of all possible tasks.
    RestrictedPairs { fraction: f64 },
    /// A task of interest revisited every `revisit_period` tasks, with
    /// pixel-permuted distractor tasks on other classes in between.
    Distractor {
        #[serde(default)]
        interest_classes: Option<Vec<usize>>,
        #[serde(default)]
        revisit_period: Option<usize>,
    },
}

/// Per-task input transform recipe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformPolicy {
    #[default]
    Identity,
    /// A fresh pixel permutation for every task.
    PermutePerTask,
    /// Fresh additive Gaussian noise for every task.
    NoisePerTask { sigma: f64 },
}

/// Declarative description of one task stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub num_classes: usize,
    pub classes_per_task: usize,
    pub num_tasks: usize,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default)]
    pub evolution: Evolution,
    #[serde(default)]
    pub transform: TransformPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn uniform(num_classes: usize, classes_per_task: usize, num_tasks: usize, seed: u64) -> Self {
        Self {
            num_classes,
            classes_per_task,
            num_tasks,
            sampler: Sampler::Uniform,
            evolution: Evolution::None,
            transform: TransformPolicy::Identity,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_sizes(self.num_classes, self.classes_per_task)?;
        if self.num_tasks == 0 {
            return Err(invalid("a scenario needs at least one task"));
        }
        let weighted = matches!(self.sampler, Sampler::Uniform | Sampler::Mixture { .. });
        if !weighted && self.evolution != Evolution::None {
            return Err(invalid(
                "distribution evolution only applies to the uniform and mixture samplers",
            ));
        }
        match &self.sampler {
            Sampler::Uniform | Sampler::Mixture { .. } => {}
            Sampler::Structured { flip_p } => {
                if self.classes_per_task != 2 {
                    return Err(invalid("the structured sampler is defined for C = 2 only"));
                }
                if !(0.0..=1.0).contains(flip_p) {
                    return Err(invalid(format!("flip_p {flip_p} outside [0, 1]")));
                }
            }
            Sampler::RestrictedPairs { fraction } => {
                if !(*fraction > 0.0 && *fraction <= 1.0) {
                    return Err(invalid(format!("pair fraction {fraction} outside (0, 1]")));
                }
            }
            Sampler::Distractor {
                interest_classes,
                revisit_period,
            } => {
                if *revisit_period == Some(0) {
                    return Err(invalid("revisit period must be >= 1"));
                }
                if let Some(set) = interest_classes {
                    if set.len() != self.classes_per_task || set.iter().any(|&c| c >= self.num_classes) {
                        return Err(invalid("interest task must hold C valid classes"));
                    }
                }
                if self.num_classes < 2 * self.classes_per_task {
                    return Err(invalid("distractor tasks need N >= 2C"));
                }
            }
        }
        if let Evolution::Cyclic { window, .. } = self.evolution {
            if window < self.classes_per_task {
                return Err(invalid("cyclic window must hold at least C classes"));
            }
        }
        if let TransformPolicy::NoisePerTask { sigma } = self.transform {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(invalid("noise sigma must be >= 0"));
            }
        }
        Ok(())
    }

    /// Initial class distribution for this scenario (before any evolution).
    pub fn initial_distribution(&self) -> Result<ClassDistribution> {
        let dist = match self.sampler {
            Sampler::Mixture { entropy_decrease } => {
                build_mixture_probs(self.num_classes, entropy_decrease, self.seed)?
            }
            _ => ClassDistribution::uniform(self.num_classes)?,
        };
        dist.with_evolution(self.evolution.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regular,
    Interest,
    Distractor,
}

/// One task of the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub t: usize,
    pub classes: Vec<usize>,
    pub sample_ids: Vec<usize>,
    pub transform: InputTransform,
    pub kind: TaskKind,
}

/// Stateful, single-consumer generator of the task sequence. The whole
/// sequence is a pure function of the scenario (including its seed).
#[derive(Clone, Debug)]
pub struct TaskStream {
    spec: ScenarioSpec,
    dist: ClassDistribution,
    class_rng: ChaCha8Rng,
    transform_rng: ChaCha8Rng,
    t: usize,
    task_pool: Vec<Vec<usize>>,
    interest: Vec<usize>,
    input_dim: usize,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl TaskStream {
    pub fn new(spec: ScenarioSpec, input_dim: usize) -> Result<Self> {
        spec.validate()?;
        let dist = spec.initial_distribution()?;
        let n = spec.num_classes;
        let c = spec.classes_per_task;
        let mut task_pool = Vec::new();
        let mut interest = Vec::new();
        match &spec.sampler {
            Sampler::Structured { .. } => task_pool = enumerate_tasks(n, c)?,
            Sampler::RestrictedPairs { fraction } => {
                let mut all = enumerate_tasks(n, c)?;
                all.shuffle(&mut seeded(spec.seed, 2));
                let keep = ((*fraction * all.len() as f64).ceil() as usize).clamp(1, all.len());
                all.truncate(keep);
                task_pool = all;
            }
            Sampler::Distractor { interest_classes, .. } => {
                interest = match interest_classes {
                    Some(set) => {
                        let mut s = set.clone();
                        s.sort_unstable();
                        s
                    }
                    None => draw_without_replacement(&vec![1.0; n], c, &mut seeded(spec.seed, 3))?,
                };
            }
            Sampler::Uniform | Sampler::Mixture { .. } => {}
        }
        Ok(Self {
            class_rng: seeded(spec.seed, 0),
            transform_rng: seeded(spec.seed, 1),
            spec,
            dist,
            t: 0,
            task_pool,
            interest,
            input_dim,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn distribution(&self) -> &ClassDistribution {
        &self.dist
    }

    /// Index of the next task to be emitted.
    pub fn position(&self) -> usize {
        self.t
    }

    /// Classes of the task of interest (distractor sampler only).
    pub fn interest_classes(&self) -> Option<&[usize]> {
        (!self.interest.is_empty()).then_some(self.interest.as_slice())
    }

    /// The fixed task subset used by the restricted-pairs sampler.
    pub fn task_pool(&self) -> &[Vec<usize>] {
        &self.task_pool
    }

    fn policy_transform(&mut self) -> Result<InputTransform> {
        Ok(match self.spec.transform {
            TransformPolicy::Identity => InputTransform::Identity,
            TransformPolicy::PermutePerTask => {
                InputTransform::pixel_permutation(self.input_dim, self.transform_rng.next_u64())
            }
            TransformPolicy::NoisePerTask { sigma } => {
                InputTransform::gaussian_noise(sigma, self.transform_rng.next_u64())?
            }
        })
    }

    /// Samples the class set, kind and transform of the next task without
    /// touching a dataset.
    pub fn next_classes(&mut self) -> Result<(usize, Vec<usize>, TaskKind, InputTransform)> {
        let t = self.t;
        let n = self.spec.num_classes;
        let c = self.spec.classes_per_task;
        let (classes, kind, transform) = match self.spec.sampler.clone() {
            Sampler::Uniform | Sampler::Mixture { .. } => {
                self.dist.prepare(t)?;
                let classes = draw_without_replacement(self.dist.probs(), c, &mut self.class_rng)?;
                self.dist.observe(&classes)?;
                (classes, TaskKind::Regular, self.policy_transform()?)
            }
            Sampler::Structured { flip_p } => {
                let mut classes = self.task_pool[t % self.task_pool.len()].clone();
                for slot in 0..classes.len() {
                    if self.class_rng.random::<f64>() < flip_p {
                        let others: Vec<usize> = (0..n).filter(|k| !classes.contains(k)).collect();
                        classes[slot] = others[self.class_rng.random_range(0..others.len())];
                    }
                }
                classes.sort_unstable();
                (classes, TaskKind::Regular, self.policy_transform()?)
            }
            Sampler::RestrictedPairs { .. } => {
                let i = self.class_rng.random_range(0..self.task_pool.len());
                (self.task_pool[i].clone(), TaskKind::Regular, self.policy_transform()?)
            }
            Sampler::Distractor { revisit_period, .. } => {
                let interest_now = t == 0 || revisit_period.is_some_and(|p| t.is_multiple_of(p));
                if interest_now {
                    (self.interest.clone(), TaskKind::Interest, InputTransform::Identity)
                } else {
                    let weights: Vec<f64> = (0..n)
                        .map(|k| if self.interest.contains(&k) { 0.0 } else { 1.0 })
                        .collect();
                    let classes = draw_without_replacement(&weights, c, &mut self.class_rng)?;
                    let transform = InputTransform::pixel_permutation(self.input_dim, self.transform_rng.next_u64());
                    (classes, TaskKind::Distractor, transform)
                }
            }
        };
        self.t += 1;
        Ok((t, classes, kind, transform))
    }

    /// Samples the next task and gathers the training samples of its classes.
    pub fn next_task(&mut self, class_index: &[Vec<usize>]) -> Result<TaskSpec> {
        let (t, classes, kind, transform) = self.next_classes()?;
        let mut sample_ids = Vec::new();
        for &c in &classes {
            let members = class_index
                .get(c)
                .ok_or_else(|| invalid(format!("class {c} missing from dataset index")))?;
            sample_ids.extend_from_slice(members);
        }
        if sample_ids.is_empty() {
            return Err(Error::Insufficient(format!("task {t} has no training samples")));
        }
        Ok(TaskSpec {
            t,
            classes,
            sample_ids,
            transform,
            kind,
        })
    }
}
