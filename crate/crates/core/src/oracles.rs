//! Slow, independent verifiers: Monte-Carlo occurrence frequencies, an
//! empirical KL estimate, a naive f64 re-implementation of the networks for
//! finite-difference gradients, and direct recomputation of forgetting.
//!
//! Nothing here calls into the code it checks beyond reading parameters and
//! sampling tasks.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::learner::{Architecture, Gradients, Network, NetworkSpec, TrainBatch, MASK_VALUE};
use crate::num::Scalar;
use crate::stream::{draw_without_replacement, ClassDistribution, Evolution, Sampler, ScenarioSpec};

pub const MIN_TRIALS: usize = 1000;
pub const MAX_FD_PARAMS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

impl MonteCarloEstimate {
    fn from_indicator_count(hits: usize, trials: usize) -> Self {
        let mean = hits as f64 / trials as f64;
        let var = if trials > 1 {
            mean * (1.0 - mean) * trials as f64 / (trials - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / trials as f64).sqrt(),
            trials,
        }
    }

    /// Whether `value` lies within `k` standard errors of the mean.
    pub fn contains(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

/// Empirical per-class occurrence frequency over `trials` sampled tasks.
pub fn mc_class_frequency<R: Rng + ?Sized>(
    dist: &ClassDistribution,
    c: usize,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<MonteCarloEstimate>> {
    if trials < MIN_TRIALS {
        return Err(invalid(format!("at least {MIN_TRIALS} trials required")));
    }
    let mut hits = vec![0usize; dist.num_classes()];
    for _ in 0..trials {
        for k in draw_without_replacement(dist.probs(), c, rng)? {
            hits[k] += 1;
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| MonteCarloEstimate::from_indicator_count(h, trials))
        .collect())
}

/// Plug-in estimate of E[log p(y|S)/p(y)] on a uniform scenario: a label is
/// drawn uniformly inside each sampled task, p(y|S) = 1/C, and p(y) is the
/// empirical share of task slots held by y.
pub fn mc_kl_estimate<R: Rng + ?Sized>(spec: &ScenarioSpec, trials: usize, rng: &mut R) -> Result<f64> {
    if spec.sampler != Sampler::Uniform || spec.evolution != Evolution::None {
        return Err(invalid("the KL oracle needs a uniform, non-evolving scenario"));
    }
    if trials < MIN_TRIALS {
        return Err(invalid(format!("at least {MIN_TRIALS} trials required")));
    }
    let (n, c) = (spec.num_classes, spec.classes_per_task);
    let weights = vec![1.0; n];
    let mut slots = vec![0usize; n];
    let mut labels = Vec::with_capacity(trials);
    for _ in 0..trials {
        let task = draw_without_replacement(&weights, c, rng)?;
        for &k in &task {
            slots[k] += 1;
        }
        labels.push(task[rng.random_range(0..task.len())]);
    }
    let total_slots = (trials * c) as f64;
    let p_cond = 1.0 / c as f64;
    let mut sum = 0.0;
    for y in labels {
        let p_marg = slots[y] as f64 / total_slots;
        sum += (p_cond / p_marg).ln();
    }
    Ok(sum / trials as f64)
}

/// Exact inclusion probability of each class under sequential weighted
/// sampling of `c` classes without replacement (exhaustive over draw
/// orders; N <= 16).
pub fn exact_inclusion_probs(probs: &[f64], c: usize) -> Result<Vec<f64>> {
    let n = probs.len();
    if n > 16 || c > n {
        return Err(invalid("exhaustive inclusion needs N <= 16 and C <= N"));
    }
    fn walk(probs: &[f64], taken: u32, left: usize, weight: f64, out: &mut [f64]) {
        if left == 0 || weight == 0.0 {
            return;
        }
        let mass: f64 = (0..probs.len())
            .filter(|i| taken & (1 << i) == 0)
            .map(|i| probs[i])
            .sum();
        if mass <= 0.0 {
            return;
        }
        for i in 0..probs.len() {
            if taken & (1 << i) != 0 || probs[i] <= 0.0 {
                continue;
            }
            let w = weight * probs[i] / mass;
            out[i] += w;
            walk(probs, taken | (1 << i), left - 1, w, out);
        }
    }
    let mut out = vec![0.0; n];
    walk(probs, 0, c, 1.0, &mut out);
    Ok(out)
}

/// f64 copy of a network's parameters evaluated with plain loops.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    spec: NetworkSpec,
    pub params: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl ReferenceModel {
    pub fn from_network<T: Scalar>(net: &Network<T>) -> Self {
        let views = net.params();
        Self {
            spec: net.spec().clone(),
            params: views
                .iter()
                .map(|p| p.data.iter().map(|x| x.as_f64()).collect())
                .collect(),
            shapes: views.into_iter().map(|p| p.shape).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    fn dense(&self, idx: usize, x: &[f64], relu: bool, pattern: &mut Vec<u32>) -> Vec<f64> {
        let (w, b) = (&self.params[idx], &self.params[idx + 1]);
        let (out, inp) = (self.shapes[idx][0], self.shapes[idx][1]);
        (0..out)
            .map(|o| {
                let mut z = b[o];
                for i in 0..inp {
                    z += w[o * inp + i] * x[i];
                }
                if relu {
                    pattern.push(u32::from(z > 0.0));
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    }

    fn conv_pool_relu(&self, idx: usize, x: &[f64], size: usize, pattern: &mut Vec<u32>) -> (Vec<f64>, usize) {
        let (w, b) = (&self.params[idx], &self.params[idx + 1]);
        let [oc, ic, k, _] = self.shapes[idx][..] else {
            unreachable!("conv weights are 4-d")
        };
        let o = size - k + 1;
        let mut conv = vec![0.0; oc * o * o];
        for c in 0..oc {
            for y in 0..o {
                for xx in 0..o {
                    let mut z = b[c];
                    for ci in 0..ic {
                        for ky in 0..k {
                            for kx in 0..k {
                                z += w[((c * ic + ci) * k + ky) * k + kx] * x[(ci * size + y + ky) * size + xx + kx];
                            }
                        }
                    }
                    conv[(c * o + y) * o + xx] = z;
                }
            }
        }
        let p = o / 2;
        let mut out = vec![0.0; oc * p * p];
        for c in 0..oc {
            for y in 0..p {
                for xx in 0..p {
                    let mut m = f64::NEG_INFINITY;
                    let mut winner = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = conv[(c * o + 2 * y + dy) * o + 2 * xx + dx];
                            if v > m {
                                m = v;
                                winner = (2 * dy + dx) as u32;
                            }
                        }
                    }
                    pattern.push(2 * winner + u32::from(m > 0.0));
                    out[(c * p + y) * p + xx] = m.max(0.0);
                }
            }
        }
        (out, p)
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x, &mut Vec::new())
    }

    /// Forward pass that appends every ReLU sign and max-pool winner to
    /// `pattern`. Within one pattern the loss is smooth in the parameters.
    fn forward_traced(&self, x: &[f64], pattern: &mut Vec<u32>) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut idx = 0;
        if self.spec.architecture == Architecture::Cnn {
            let mut size = 28;
            for _ in 0..2 {
                let (next, s) = self.conv_pool_relu(idx, &a, size, pattern);
                a = next;
                size = s;
                idx += 2;
            }
        }
        while idx + 2 < self.params.len() {
            a = self.dense(idx, &a, true, pattern);
            idx += 2;
        }
        self.dense(idx, &a, false, pattern)
    }

    /// Mean cross-entropy, with absent-class logits set to the mask value.
    pub fn loss(&self, inputs: &[Vec<f64>], targets: &[usize], masking: bool) -> Result<f64> {
        self.loss_traced(inputs, targets, masking, &mut Vec::new())
    }

    fn loss_traced(
        &self,
        inputs: &[Vec<f64>],
        targets: &[usize],
        masking: bool,
        pattern: &mut Vec<u32>,
    ) -> Result<f64> {
        let present: Vec<usize> = {
            let mut p = targets.to_vec();
            p.sort_unstable();
            p.dedup();
            p
        };
        let mut total = 0.0;
        for (x, &t) in inputs.iter().zip(targets) {
            let mut logits = self.forward_traced(x, pattern);
            if masking {
                for (j, l) in logits.iter_mut().enumerate() {
                    if !present.contains(&j) {
                        *l = MASK_VALUE;
                    }
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += lse - logits[t];
        }
        let loss = total / inputs.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("reference loss is {loss}")));
        }
        Ok(loss)
    }
}

fn batch_rows<T: Scalar>(batch: &TrainBatch<T>) -> Vec<Vec<f64>> {
    batch
        .inputs
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect()
}

/// One central difference. `smooth` is false when some ReLU sign or max-pool
/// winner differs between the base point and either perturbed point: the
/// quotient then straddles a kink and need not match the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdPoint {
    pub value: f64,
    pub smooth: bool,
}

/// Central finite differences of the reference loss at the given
/// (tensor, index) coordinates, each flagged for kink crossings.
pub fn finite_difference_checked<T: Scalar>(
    net: &Network<T>,
    batch: &TrainBatch<T>,
    masking: bool,
    step: f64,
    coords: &[(usize, usize)],
) -> Result<Vec<FdPoint>> {
    if !(step > 0.0) {
        return Err(invalid("finite-difference step must be > 0"));
    }
    let mut model = ReferenceModel::from_network(net);
    let rows = batch_rows(batch);
    let mut base = Vec::new();
    model.loss_traced(&rows, &batch.targets, masking, &mut base)?;
    let (mut up, mut down) = (Vec::new(), Vec::new());
    let mut out = Vec::with_capacity(coords.len());
    for &(p, i) in coords {
        let orig = model.params[p][i];
        up.clear();
        down.clear();
        model.params[p][i] = orig + step;
        let plus = model.loss_traced(&rows, &batch.targets, masking, &mut up)?;
        model.params[p][i] = orig - step;
        let minus = model.loss_traced(&rows, &batch.targets, masking, &mut down)?;
        model.params[p][i] = orig;
        out.push(FdPoint {
            value: (plus - minus) / (2.0 * step),
            smooth: up == base && down == base,
        });
    }
    Ok(out)
}

/// Central finite differences of the reference loss at the given
/// (tensor, index) coordinates.
pub fn finite_difference_at<T: Scalar>(
    net: &Network<T>,
    batch: &TrainBatch<T>,
    masking: bool,
    step: f64,
    coords: &[(usize, usize)],
) -> Result<Vec<f64>> {
    Ok(finite_difference_checked(net, batch, masking, step, coords)?
        .into_iter()
        .map(|p| p.value)
        .collect())
}

/// Central finite differences for every parameter (at most 10^4 of them).
pub fn finite_difference_grads<T: Scalar>(
    net: &Network<T>,
    batch: &TrainBatch<T>,
    masking: bool,
    step: f64,
) -> Result<Gradients<f64>> {
    let model = ReferenceModel::from_network(net);
    if model.param_count() > MAX_FD_PARAMS {
        return Err(invalid(format!(
            "{} parameters exceed the finite-difference limit {MAX_FD_PARAMS}",
            model.param_count()
        )));
    }
    let coords: Vec<(usize, usize)> = model
        .params
        .iter()
        .enumerate()
        .flat_map(|(p, v)| (0..v.len()).map(move |i| (p, i)))
        .collect();
    let flat = finite_difference_at(net, batch, masking, step, &coords)?;
    let mut it = flat.into_iter();
    Ok(Gradients {
        tensors: model
            .params
            .iter()
            .map(|v| it.by_ref().take(v.len()).collect())
            .collect(),
    })
}

/// Local forgetting between consecutive rows of a per-class accuracy
/// matrix, and its mean over defined entries.
pub fn recompute_metrics(
    matrix: &[Vec<f64>],
    task_classes: &[Vec<usize>],
    n: usize,
) -> Result<(Vec<Option<f64>>, f64)> {
    if matrix.len() != task_classes.len() || matrix.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch("accuracy matrix does not match task list".into()));
    }
    if matrix.len() < 2 {
        return Err(Error::Insufficient("need at least two evaluated tasks".into()));
    }
    let mut series = vec![None];
    for t in 1..matrix.len() {
        let mut now = task_classes[t].clone();
        let mut before = task_classes[t - 1].clone();
        now.sort_unstable();
        before.sort_unstable();
        if now == before {
            series.push(None);
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (j, (a, b)) in matrix[t].iter().zip(&matrix[t - 1]).enumerate() {
            if !now.contains(&j) {
                sum += a - b;
                count += 1;
            }
        }
        series.push((count > 0).then(|| sum / count as f64));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in series.iter().flatten() {
        sum += v;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Insufficient("no defined local forgetting value".into()));
    }
    Ok((series, sum / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kink_crossings_are_flagged() {
        // One hidden unit whose pre-activation sits 1e-6 above zero.
        let mut net = Network::<f64>::new(NetworkSpec::mlp(1, &[1], 2), 0).unwrap();
        {
            let mut p = net.params_mut();
            p[0][0] = 1.0;
            p[1][0] = 1e-6 - 0.5;
        }
        let batch = TrainBatch::new(Array2::from_elem((1, 1), 0.5), vec![1]).unwrap();
        let coarse = finite_difference_checked(&net, &batch, false, 1e-4, &[(1, 0), (3, 0)]).unwrap();
        assert!(!coarse[0].smooth);
        // Head bias does not move the hidden unit.
        assert!(coarse[1].smooth);
        let fine = finite_difference_checked(&net, &batch, false, 1e-8, &[(1, 0)]).unwrap();
        assert!(fine[0].smooth);
    }

    #[test]
    fn inclusion_uniform_matches_c_over_n() {
        let p = exact_inclusion_probs(&[0.25; 4], 2).unwrap();
        assert!(p.iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let full = exact_inclusion_probs(&[0.1, 0.2, 0.3, 0.4], 4).unwrap();
        assert!(full.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn kl_is_zero_when_tasks_hold_every_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ScenarioSpec::uniform(5, 5, 1, 0);
        assert_eq!(mc_kl_estimate(&spec, 1000, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn reference_forward_matches_on_mlp() {
        let net = Network::<f64>::new(NetworkSpec::mlp(3, &[4], 2), 7).unwrap();
        let x = Array2::from_shape_vec((1, 3), vec![0.1, 0.5, 0.9]).unwrap();
        let fast = net.forward(x.view()).unwrap();
        let slow = ReferenceModel::from_network(&net).forward_row(&[0.1, 0.5, 0.9]);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_task_log_has_no_total() {
        assert!(recompute_metrics(&[vec![0.5; 3]], &[vec![0]], 3).is_err());
        assert!(recompute_metrics(&[vec![0.5; 3]], &[vec![0], vec![1]], 3).is_err());
    }
}
