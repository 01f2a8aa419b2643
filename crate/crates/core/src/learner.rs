//! Small from-scratch classifiers (MLP and a two-layer CNN) with a single head
//! over all classes, mean cross-entropy, optional output masking, and
//! SGD / SGD+momentum / Adam.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{apply_transform, LabeledDataset};
use crate::error::{invalid, Error, Result};
use crate::num::Scalar;
use crate::stream::TaskSpec;

/// Value written over the logits of classes absent from a mini-batch.
pub const MASK_VALUE: f64 = -1e9;

pub const ALLOWED_WIDTHS: [usize; 5] = [1, 2, 4, 8, 16];

const CNN_KERNEL: usize = 5;
const CNN_CONV1: usize = 10;
const CNN_CONV2: usize = 20;
const CNN_FC: usize = 50;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected ReLU layers; every hidden width is scaled by the
    /// width multiplier.
    Mlp { hidden: Vec<usize> },
    /// conv(10k, 5x5) -> pool -> relu -> conv(20k, 5x5) -> pool -> relu ->
    /// fc(50k) -> relu -> head, on 28x28 single-channel inputs.
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub width: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
            width: 1,
            input_dim,
            num_classes,
        }
    }

    pub fn cnn(num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Cnn,
            width: 1,
            input_dim: 28 * 28,
            num_classes,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_WIDTHS.contains(&self.width) {
            return Err(invalid(format!(
                "width multiplier {} not in {ALLOWED_WIDTHS:?}",
                self.width
            )));
        }
        if self.num_classes < 2 {
            return Err(invalid("a classifier needs at least 2 classes"));
        }
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                if self.input_dim == 0 || hidden.contains(&0) {
                    return Err(invalid("MLP layer sizes must be positive"));
                }
            }
            Architecture::Cnn => {
                if self.input_dim != 28 * 28 {
                    return Err(invalid("the CNN accepts 28x28 single-channel inputs only"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Dense<T> {
    w: Array2<T>,
    b: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct Conv<T> {
    /// out_channels x (in_channels * k * k)
    w: Array2<T>,
    b: Array1<T>,
    in_channels: usize,
    in_size: usize,
    kernel: usize,
}

impl<T> Conv<T> {
    fn out_channels(&self) -> usize {
        self.b.len()
    }
    fn out_size(&self) -> usize {
        self.in_size - self.kernel + 1
    }
    fn pooled_size(&self) -> usize {
        self.out_size() / 2
    }
    fn pooled_len(&self) -> usize {
        self.out_channels() * self.pooled_size() * self.pooled_size()
    }
}

/// Read-only view of one named parameter tensor.
#[derive(Debug)]
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Gradients in parameter order, one flat tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }
}

/// A named tensor in a checkpoint; values are stored as f64 whatever the
/// network precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    convs: Vec<Conv<T>>,
    dense: Vec<Dense<T>>,
}

fn uniform_init<T: Scalar, R: Rng>(shape: (usize, usize), fan_in: usize, rng: &mut R) -> Array2<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || T::of(rng.random_range(-bound..bound)))
}

fn relu_inplace<T: Scalar>(a: &mut Array2<T>) {
    a.mapv_inplace(|x| if x > T::zero() { x } else { T::zero() });
}

/// Intermediate values of a forward pass needed by backpropagation.
struct ConvTrace<T> {
    cols: Vec<Array2<T>>,
    argmax: Vec<Vec<usize>>,
    post: Array2<T>,
}

struct Trace<T> {
    convs: Vec<ConvTrace<T>>,
    /// Input of each dense layer (post-ReLU activations, or the raw input).
    dense_inputs: Vec<Array2<T>>,
    logits: Array2<T>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with weights and biases drawn uniformly from
    /// +-1/sqrt(fan_in), fixed by `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = spec.width;
        let mut convs = Vec::new();
        let mut dense = Vec::new();
        let mut push_dense = |fan_in: usize, out: usize, rng: &mut ChaCha8Rng| {
            let w = uniform_init::<T, _>((out, fan_in), fan_in, rng);
            let b = uniform_init::<T, _>((1, out), fan_in, rng)
                .into_shape_with_order(out)
                .unwrap();
            dense.push(Dense { w, b });
        };
        match &spec.architecture {
            Architecture::Mlp { hidden } => {
                let mut fan_in = spec.input_dim;
                for &h in hidden {
                    push_dense(fan_in, h * k, &mut rng);
                    fan_in = h * k;
                }
                push_dense(fan_in, spec.num_classes, &mut rng);
            }
            Architecture::Cnn => {
                let mut in_channels = 1;
                let mut in_size = 28;
                for out in [CNN_CONV1 * k, CNN_CONV2 * k] {
                    let fan_in = in_channels * CNN_KERNEL * CNN_KERNEL;
                    let w = uniform_init::<T, _>((out, fan_in), fan_in, &mut rng);
                    let b = uniform_init::<T, _>((1, out), fan_in, &mut rng)
                        .into_shape_with_order(out)
                        .unwrap();
                    let conv = Conv {
                        w,
                        b,
                        in_channels,
                        in_size,
                        kernel: CNN_KERNEL,
                    };
                    in_channels = out;
                    in_size = conv.pooled_size();
                    convs.push(conv);
                }
                let flat = in_channels * in_size * in_size;
                push_dense(flat, CNN_FC * k, &mut rng);
                push_dense(CNN_FC * k, spec.num_classes, &mut rng);
            }
        }
        Ok(Self { spec, convs, dense })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{}.weight", i + 1));
            names.push(format!("conv{}.bias", i + 1));
        }
        let last = self.dense.len() - 1;
        for i in 0..self.dense.len() {
            let base = if i == last {
                "head".to_string()
            } else if self.convs.is_empty() {
                format!("hidden{i}")
            } else {
                format!("fc{}", i + 1)
            };
            names.push(format!("{base}.weight"));
            names.push(format!("{base}.bias"));
        }
        names
    }

    /// All parameters in a fixed order: convolutions, then dense layers, the
    /// head last (weight, then bias).
    pub fn params(&self) -> Vec<ParamView<'_, T>> {
        let names = self.param_names();
        let mut out = Vec::with_capacity(names.len());
        let mut names = names.into_iter();
        for conv in &self.convs {
            out.push(ParamView {
                name: names.next().unwrap(),
                shape: vec![conv.out_channels(), conv.in_channels, conv.kernel, conv.kernel],
                data: conv.w.as_slice().unwrap(),
            });
            out.push(ParamView {
                name: names.next().unwrap(),
                shape: vec![conv.out_channels()],
                data: conv.b.as_slice().unwrap(),
            });
        }
        for layer in &self.dense {
            out.push(ParamView {
                name: names.next().unwrap(),
                shape: layer.w.shape().to_vec(),
                data: layer.w.as_slice().unwrap(),
            });
            out.push(ParamView {
                name: names.next().unwrap(),
                shape: vec![layer.b.len()],
                data: layer.b.as_slice().unwrap(),
            });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for conv in &mut self.convs {
            out.push(conv.w.as_slice_mut().unwrap());
            out.push(conv.b.as_slice_mut().unwrap());
        }
        for layer in &mut self.dense {
            out.push(layer.w.as_slice_mut().unwrap());
            out.push(layer.b.as_slice_mut().unwrap());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Head weight matrix, one row per class.
    pub fn head_weight(&self) -> ArrayView2<'_, T> {
        self.dense.last().unwrap().w.view()
    }

    pub fn head_bias(&self) -> ArrayView1<'_, T> {
        self.dense.last().unwrap().b.view()
    }

    pub fn zero_head(&mut self) {
        let head = self.dense.last_mut().unwrap();
        head.w.fill(T::zero());
        head.b.fill(T::zero());
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params()
                .into_iter()
                .map(|p| NamedTensor {
                    name: p.name,
                    shape: p.shape,
                    data: p.data.iter().map(|x| x.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a network of `spec` from a checkpoint with matching names and
    /// shapes.
    pub fn from_checkpoint(spec: NetworkSpec, checkpoint: &Checkpoint) -> Result<Self> {
        let mut net = Self::new(spec, 0)?;
        let expected: Vec<(String, Vec<usize>)> = net.params().into_iter().map(|p| (p.name, p.shape)).collect();
        if expected.len() != checkpoint.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {} tensors, network has {}",
                checkpoint.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (slot, tensor)) in expected
            .iter()
            .zip(net.params_mut().into_iter().zip(&checkpoint.tensors))
        {
            if *name != tensor.name || *shape != tensor.shape || slot.len() != tensor.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {} {:?} does not match {name} {shape:?}",
                    tensor.name, tensor.shape
                )));
            }
            for (dst, &src) in slot.iter_mut().zip(&tensor.data) {
                *dst = T::of(src);
            }
        }
        Ok(net)
    }

    fn check_inputs(&self, inputs: &ArrayView2<'_, T>) -> Result<()> {
        if inputs.ncols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input width {} does not match network input {}",
                inputs.ncols(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn conv_forward(conv: &Conv<T>, input: ArrayView2<'_, T>, keep: bool) -> ConvTrace<T> {
        let batch = input.nrows();
        let (ic, h, k) = (conv.in_channels, conv.in_size, conv.kernel);
        let (oc, o, p) = (conv.out_channels(), conv.out_size(), conv.pooled_size());
        let mut post = Array2::<T>::zeros((batch, conv.pooled_len()));
        let mut all_cols = Vec::new();
        let mut all_argmax = Vec::new();
        let mut cols = Array2::<T>::zeros((ic * k * k, o * o));
        for s in 0..batch {
            let x = input.row(s);
            let x = x.as_slice().expect("contiguous input row");
            for ci in 0..ic {
                for ky in 0..k {
                    for kx in 0..k {
                        let r = (ci * k + ky) * k + kx;
                        let mut row = cols.row_mut(r);
                        let row = row.as_slice_mut().unwrap();
                        for oy in 0..o {
                            let src = &x[ci * h * h + (oy + ky) * h + kx..][..o];
                            row[oy * o..(oy + 1) * o].copy_from_slice(src);
                        }
                    }
                }
            }
            let mut out = conv.w.dot(&cols);
            for (mut r, &b) in out.rows_mut().into_iter().zip(conv.b.iter()) {
                r.mapv_inplace(|v| v + b);
            }
            let out = out.as_slice().unwrap();
            let mut argmax = vec![0usize; conv.pooled_len()];
            let mut dst = post.row_mut(s);
            for c in 0..oc {
                for py in 0..p {
                    for px in 0..p {
                        let mut best = c * o * o + (2 * py) * o + 2 * px;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = c * o * o + (2 * py + dy) * o + 2 * px + dx;
                            if out[idx] > out[best] {
                                best = idx;
                            }
                        }
                        let q = (c * p + py) * p + px;
                        argmax[q] = best;
                        let v = out[best];
                        dst[q] = if v > T::zero() { v } else { T::zero() };
                    }
                }
            }
            if keep {
                all_cols.push(cols.clone());
                all_argmax.push(argmax);
            }
        }
        ConvTrace {
            cols: all_cols,
            argmax: all_argmax,
            post,
        }
    }

    fn run(&self, inputs: ArrayView2<'_, T>, keep: bool) -> Trace<T> {
        let mut convs = Vec::new();
        let mut x = inputs.as_standard_layout().into_owned();
        for conv in &self.convs {
            let trace = Self::conv_forward(conv, x.view(), keep);
            x = trace.post.clone();
            convs.push(trace);
        }
        let mut dense_inputs = Vec::with_capacity(self.dense.len());
        let last = self.dense.len() - 1;
        for (i, layer) in self.dense.iter().enumerate() {
            let mut z = x.dot(&layer.w.t());
            z += &layer.b;
            if i < last {
                relu_inplace(&mut z);
            }
            if keep {
                dense_inputs.push(std::mem::replace(&mut x, z));
            } else {
                x = z;
            }
        }
        Trace {
            convs,
            dense_inputs,
            logits: x,
        }
    }

    /// Logits of shape (batch, num_classes).
    pub fn forward(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check_inputs(&inputs)?;
        Ok(self.run(inputs, false).logits)
    }

    /// Mean cross-entropy of the batch, forward pass only.
    pub fn loss(&self, batch: &TrainBatch<T>, masking: bool) -> Result<T> {
        let mut logits = self.forward(batch.inputs.view())?;
        if masking {
            mask_logits(&mut logits, &batch.present_classes)?;
        }
        Ok(softmax_cross_entropy(&logits, &batch.targets)?.0)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    /// With `masking`, logits of classes absent from the batch are replaced by
    /// a large negative constant before the softmax, so their head rows get
    /// exactly zero gradient.
    pub fn loss_and_grads(&self, batch: &TrainBatch<T>, masking: bool) -> Result<(T, Gradients<T>)> {
        self.check_inputs(&batch.inputs.view())?;
        let mut trace = self.run(batch.inputs.view(), true);
        if masking {
            mask_logits(&mut trace.logits, &batch.present_classes)?;
        }
        let (loss, dlogits) = softmax_cross_entropy(&trace.logits, &batch.targets)?;
        let grads = self.backward(&trace, dlogits);
        Ok((loss, grads))
    }

    fn backward(&self, trace: &Trace<T>, dlogits: Array2<T>) -> Gradients<T> {
        let mut dense_grads = Vec::with_capacity(self.dense.len());
        let mut d = dlogits;
        for (i, layer) in self.dense.iter().enumerate().rev() {
            let input = &trace.dense_inputs[i];
            let gw = d.t().dot(input);
            let gb = d.sum_axis(Axis(0));
            dense_grads.push((gw, gb));
            if i == 0 && self.convs.is_empty() {
                break;
            }
            let mut d_in = d.dot(&layer.w);
            // Every dense input except the raw features is a ReLU output, and
            // the convolution output is ReLU(pool(.)) as well.
            d_in.zip_mut_with(input, |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
            d = d_in;
        }
        dense_grads.reverse();

        let mut conv_grads = Vec::with_capacity(self.convs.len());
        for (l, conv) in self.convs.iter().enumerate().rev() {
            let ct = &trace.convs[l];
            let need_input = l > 0;
            let (gw, gb, d_in) = Self::conv_backward(conv, ct, &d, need_input);
            conv_grads.push((gw, gb));
            if let Some(mut d_in) = d_in {
                let prev = &trace.convs[l - 1].post;
                d_in.zip_mut_with(prev, |g, &a| {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                });
                d = d_in;
            }
        }
        conv_grads.reverse();

        let mut tensors = Vec::new();
        // Products of transposed views may come back column-major; flatten in
        // logical order so each gradient lines up with its parameter slice.
        for (gw, gb) in conv_grads.into_iter().chain(dense_grads) {
            tensors.push(gw.iter().copied().collect());
            tensors.push(gb.iter().copied().collect());
        }
        Gradients { tensors }
    }

    /// `d_post` is the gradient with respect to the pooled output *before*
    /// the ReLU mask has been applied; masking happens here.
    fn conv_backward(
        conv: &Conv<T>,
        trace: &ConvTrace<T>,
        d_post: &Array2<T>,
        need_input: bool,
    ) -> (Array2<T>, Array1<T>, Option<Array2<T>>) {
        let batch = d_post.nrows();
        let (ic, h, k) = (conv.in_channels, conv.in_size, conv.kernel);
        let (oc, o) = (conv.out_channels(), conv.out_size());
        let mut gw = Array2::<T>::zeros(conv.w.raw_dim());
        let mut gb = Array1::<T>::zeros(oc);
        let mut d_in = need_input.then(|| Array2::<T>::zeros((batch, ic * h * h)));
        let mut d_out = Array2::<T>::zeros((oc, o * o));
        for s in 0..batch {
            d_out.fill(T::zero());
            {
                let flat = d_out.as_slice_mut().unwrap();
                let post = trace.post.row(s);
                for (q, &src) in trace.argmax[s].iter().enumerate() {
                    if post[q] > T::zero() {
                        flat[src] += d_post[[s, q]];
                    }
                }
            }
            gw += &d_out.dot(&trace.cols[s].t());
            gb += &d_out.sum_axis(Axis(1));
            if let Some(d_in) = d_in.as_mut() {
                let d_cols = conv.w.t().dot(&d_out);
                let mut dst = d_in.row_mut(s);
                let dst = dst.as_slice_mut().unwrap();
                for ci in 0..ic {
                    for ky in 0..k {
                        for kx in 0..k {
                            let r = (ci * k + ky) * k + kx;
                            let row = d_cols.slice(s![r, ..]);
                            let row = row.as_slice().unwrap();
                            for oy in 0..o {
                                let base = ci * h * h + (oy + ky) * h + kx;
                                for (t, &g) in dst[base..base + o].iter_mut().zip(&row[oy * o..(oy + 1) * o]) {
                                    *t += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        (gw, gb, d_in)
    }
}

/// Overwrites the logits of every class outside `present` with [`MASK_VALUE`].
pub fn mask_logits<T: Scalar>(logits: &mut Array2<T>, present: &[usize]) -> Result<()> {
    if present.is_empty() {
        return Err(invalid("cannot mask logits with an empty present-class set"));
    }
    let n = logits.ncols();
    let mut keep = vec![false; n];
    for &c in present {
        *keep
            .get_mut(c)
            .ok_or_else(|| invalid(format!("present class {c} outside [0, {n})")))? = true;
    }
    let fill = T::of(MASK_VALUE);
    for mut row in logits.rows_mut() {
        for (v, &k) in row.iter_mut().zip(&keep) {
            if !k {
                *v = fill;
            }
        }
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[usize]) -> Result<(T, Array2<T>)> {
    let batch = logits.nrows();
    if batch != targets.len() || batch == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{batch} logit rows for {} targets",
            targets.len()
        )));
    }
    let n = logits.ncols();
    let inv_b = T::one() / T::of(batch as f64);
    let mut grad = Array2::<T>::zeros((batch, n));
    let mut total = 0.0f64;
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets).enumerate() {
        if t >= n {
            return Err(invalid(format!("target {t} outside [0, {n})")));
        }
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        let mut g = grad.row_mut(i);
        for (gj, &l) in g.iter_mut().zip(row.iter()) {
            let e = (l - m).exp();
            *gj = e;
            sum += e;
        }
        total += (sum.ln() + m - row[t]).as_f64();
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_b;
        }
        g[t] -= inv_b;
    }
    let loss = total / batch as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    Ok((T::of(loss), grad))
}

/// One mini-batch: inputs, targets and the set of classes occurring in it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T> {
    pub inputs: Array2<T>,
    pub targets: Vec<usize>,
    pub present_classes: Vec<usize>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn new(inputs: Array2<T>, targets: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != targets.len() || targets.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} input rows for {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        let present_classes = targets.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        Ok(Self {
            inputs,
            targets,
            present_classes,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

/// Everything needed to build a fresh optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "OptimizerConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "OptimizerConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "OptimizerConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "OptimizerConfig::default_eps")]
    pub eps: f64,
}

impl OptimizerConfig {
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }

    pub fn sgd(lr: f64) -> Self {
        Self::with_kind(OptimizerKind::Sgd, lr)
    }

    pub fn sgd_momentum(lr: f64, momentum: f64) -> Self {
        Self {
            momentum,
            ..Self::with_kind(OptimizerKind::SgdMomentum, lr)
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::with_kind(OptimizerKind::Adam, lr)
    }

    fn with_kind(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: Self::default_momentum(),
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            eps: Self::default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid("Adam betas must lie in [0, 1) and eps must be > 0"));
        }
        Ok(())
    }
}

/// Optimizer state with one buffer per parameter tensor (none for plain SGD).
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, net: &Network<T>) -> Result<Self> {
        config.validate()?;
        let zeros = || -> Vec<Vec<T>> { net.params().iter().map(|p| vec![T::zero(); p.data.len()]).collect() };
        let (first, second) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::SgdMomentum => (zeros(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Ok(Self {
            config,
            first,
            second,
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn has_buffers(&self) -> bool {
        !self.first.is_empty()
    }

    /// Applies one update in place.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != grads.tensors.len() || params.iter().zip(&grads.tensors).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::ShapeMismatch(
                "gradient tensors do not match parameter shapes".into(),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.steps += 1;
        let lr = T::of(self.config.lr);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads.tensors) {
                    for (w, &d) in p.iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = T::of(self.config.momentum);
                for ((p, g), v) in params.iter_mut().zip(&grads.tensors).zip(&mut self.first) {
                    for ((w, &d), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = mu * *vi + d;
                        *w -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::of(self.config.beta1);
                let b2 = T::of(self.config.beta2);
                let eps = T::of(self.config.eps);
                let t = self.steps as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(&grads.tensors)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &d), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (T::one() - b1) * d;
                        *vi = b2 * *vi + (T::one() - b2) * d * d;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        if params.iter().any(|p| p.iter().any(|w| !w.is_finite())) {
            return Err(Error::Numerical("non-finite parameter after update".into()));
        }
        Ok(())
    }
}

/// Materialized training data of one task (inputs already transformed).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet<T> {
    pub inputs: Array2<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn new(inputs: Array2<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.nrows(),
                labels: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    /// Gathers the task's samples and applies its transform.
    pub fn from_task(task: &TaskSpec, dataset: &LabeledDataset<T>) -> Result<Self> {
        let raw = dataset.gather(&task.sample_ids);
        let inputs = apply_transform(raw.view(), &task.transform)?;
        Self::new(inputs, dataset.gather_labels(&task.sample_ids))
    }

    /// Every sample of `dataset` whose label is in `classes`, untransformed.
    pub fn from_classes(dataset: &LabeledDataset<T>, classes: &[usize]) -> Result<Self> {
        let ids: Vec<usize> = classes
            .iter()
            .flat_map(|&c| dataset.class_index().get(c).cloned().unwrap_or_default())
            .collect();
        Self::new(dataset.gather(&ids), dataset.gather_labels(&ids))
    }

    pub fn whole(dataset: &LabeledDataset<T>) -> Self {
        Self {
            inputs: dataset.features().to_owned(),
            labels: dataset.labels().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<TrainBatch<T>> {
        TrainBatch::new(
            self.inputs.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub masking: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub mean_loss: f64,
    pub steps: u64,
    pub samples: u64,
}

/// Trains for `opts.epochs` passes over `data`, reshuffling every epoch.
pub fn train_task<T: Scalar, R: Rng + ?Sized>(
    net: &mut Network<T>,
    opt: &mut Optimizer<T>,
    data: &TrainingSet<T>,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainStats> {
    if data.is_empty() {
        return Err(Error::Insufficient("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    let mut stats = TrainStats::default();
    let mut loss_sum = 0.0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(opts.batch_size) {
            let batch = data.batch(chunk)?;
            let (loss, grads) = net.loss_and_grads(&batch, opts.masking)?;
            opt.step(net, &grads)?;
            loss_sum += loss.as_f64();
            stats.steps += 1;
            stats.samples += chunk.len() as u64;
        }
    }
    if stats.steps > 0 {
        stats.mean_loss = loss_sum / stats.steps as f64;
    }
    Ok(stats)
}

fn argmax_over<T: Scalar>(row: ArrayView1<'_, T>, classes: Option<&[usize]>) -> usize {
    let mut best = usize::MAX;
    let mut best_v = T::neg_infinity();
    let mut consider = |c: usize| {
        let v = row[c];
        if best == usize::MAX || v > best_v {
            best = c;
            best_v = v;
        }
    };
    match classes {
        Some(cs) => cs.iter().for_each(|&c| consider(c)),
        None => (0..row.len()).for_each(&mut consider),
    }
    best
}

/// Test accuracy overall and per class (single head, unmasked argmax).
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub overall: f64,
    pub per_class: Vec<f64>,
    pub counts: Vec<usize>,
}

fn predictions<T: Scalar>(
    net: &Network<T>,
    inputs: ArrayView2<'_, T>,
    classes: Option<&[usize]>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.nrows());
    let mut start = 0;
    while start < inputs.nrows() {
        let end = (start + EVAL_CHUNK).min(inputs.nrows());
        let logits = net.forward(inputs.slice(s![start..end, ..]))?;
        out.extend(logits.rows().into_iter().map(|r| argmax_over(r, classes)));
        start = end;
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(net: &Network<T>, test: &LabeledDataset<T>) -> Result<Evaluation> {
    let n = net.num_classes();
    let preds = predictions(net, test.features(), None)?;
    let mut correct = vec![0usize; n];
    let mut counts = vec![0usize; n];
    for (&p, &y) in preds.iter().zip(test.labels()) {
        if y >= n {
            return Err(invalid(format!("test label {y} outside [0, {n})")));
        }
        counts[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let hits: usize = correct.iter().sum();
    let per_class = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &k)| if k == 0 { 0.0 } else { c as f64 / k as f64 })
        .collect();
    Ok(Evaluation {
        overall: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        per_class,
        counts,
    })
}

/// Accuracy on the samples of `data`, with the argmax restricted to
/// `classes` when given.
pub fn accuracy_on<T: Scalar>(net: &Network<T>, data: &TrainingSet<T>, classes: Option<&[usize]>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Insufficient("no samples to evaluate".into()));
    }
    let preds = predictions(net, data.inputs.view(), classes)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_batch(n_in: usize, targets: Vec<usize>, seed: u64) -> TrainBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = Array2::from_shape_simple_fn((targets.len(), n_in), || rng.random_range(0.0..1.0));
        TrainBatch::new(inputs, targets).unwrap()
    }

    #[test]
    fn zero_head_gives_equal_logits() {
        let mut net = Network::<f64>::new(NetworkSpec::mlp(6, &[5], 4), 1).unwrap();
        net.zero_head();
        let logits = net.forward(tiny_batch(6, vec![0, 1, 2], 2).inputs.view()).unwrap();
        assert_eq!(logits.shape(), &[3, 4]);
        for row in logits.rows() {
            assert!(row.iter().all(|&v| v == row[0]));
        }
        assert!(net.forward(Array2::zeros((2, 5)).view()).is_err());
    }

    #[test]
    fn masking_examples() {
        let mut l = array![[2.0, -1.0, 0.5]];
        mask_logits(&mut l, &[0, 2]).unwrap();
        assert_eq!(l, array![[2.0, -1e9, 0.5]]);
        let p = softmax(&l);
        assert_eq!(p[[0, 1]], 0.0);
        let mut l32 = array![[2.0f32, -1.0, 0.5]];
        mask_logits(&mut l32, &[0, 2]).unwrap();
        assert_eq!(softmax(&l32)[[0, 1]], 0.0);
        let mut all = array![[1.0, 2.0, 3.0]];
        mask_logits(&mut all, &[0, 1, 2]).unwrap();
        assert_eq!(all, array![[1.0, 2.0, 3.0]]);
        assert!(mask_logits(&mut all, &[]).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_ln2() {
        let (loss, grad) = softmax_cross_entropy(&array![[0.0, 0.0]], &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, array![[-0.5, 0.5]]);
        assert!(matches!(
            softmax_cross_entropy(&array![[f64::NAN, 0.0]], &[0]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn masked_head_rows_have_zero_gradient() {
        for spec in [NetworkSpec::mlp(8, &[7, 6], 10), NetworkSpec::mlp(8, &[], 10)] {
            let net = Network::<f64>::new(spec, 3).unwrap();
            let batch = tiny_batch(8, vec![3, 5, 3], 4);
            let (_, grads) = net.loss_and_grads(&batch, true).unwrap();
            let n = grads.tensors.len();
            let (gw, gb) = (&grads.tensors[n - 2], &grads.tensors[n - 1]);
            let width = gw.len() / 10;
            for c in (0..10).filter(|&c| c != 3 && c != 5) {
                assert!(gw[c * width..(c + 1) * width].iter().all(|&g| g == 0.0));
                assert_eq!(gb[c], 0.0);
            }
            assert!(gw[3 * width..4 * width].iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn gradients_follow_parameter_layout() {
        // Narrow input with a wider head: the weight-gradient product comes
        // back column-major, which once scrambled the head gradient.
        let net = Network::<f64>::new(NetworkSpec::mlp(1, &[1], 4).with_width(2), 7).unwrap();
        let batch = tiny_batch(1, vec![0, 2, 3], 4);
        let (_, grads) = net.loss_and_grads(&batch, false).unwrap();
        let h = 1e-6;
        for (p, g) in grads.tensors.iter().enumerate() {
            for (i, &analytic) in g.iter().enumerate() {
                let mut plus = net.clone();
                plus.params_mut()[p][i] += h;
                let mut minus = net.clone();
                minus.params_mut()[p][i] -= h;
                let fd = (plus.loss(&batch, false).unwrap() - minus.loss(&batch, false).unwrap()) / (2.0 * h);
                assert!((analytic - fd).abs() < 1e-7, "tensor {p} idx {i}: {analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn sgd_step_example() {
        let mut net = Network::<f64>::new(NetworkSpec::mlp(1, &[], 2), 0).unwrap();
        for p in net.params_mut() {
            p.fill(1.0);
        }
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &net).unwrap();
        assert!(!opt.has_buffers());
        let grads = Gradients {
            tensors: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        opt.step(&mut net, &grads).unwrap();
        assert!(net.params().iter().all(|p| p.data.iter().all(|&w| w == 0.95)));
    }

    #[test]
    fn momentum_recurrence() {
        let mut net = Network::<f64>::new(NetworkSpec::mlp(1, &[], 2), 0).unwrap();
        for p in net.params_mut() {
            p.fill(0.0);
        }
        let mut opt = Optimizer::new(OptimizerConfig::sgd_momentum(1.0, 0.9), &net).unwrap();
        let grads = Gradients {
            tensors: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        };
        opt.step(&mut net, &grads).unwrap();
        opt.step(&mut net, &grads).unwrap();
        for p in net.params() {
            for &w in p.data {
                assert!((w + 2.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = Network::<f64>::new(NetworkSpec::mlp(3, &[4], 2), 5).unwrap();
        let before = net.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3), &net).unwrap();
        let zeros = Gradients {
            tensors: net.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
        };
        opt.step(&mut net, &zeros).unwrap();
        assert_eq!(net, before);
        let bad = Gradients {
            tensors: vec![vec![0.0; 1]],
        };
        assert!(matches!(opt.step(&mut net, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn step_counts_and_epochs() {
        let mut net = Network::<f32>::new(NetworkSpec::mlp(4, &[3], 3), 0).unwrap();
        let before = net.clone();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &net).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = TrainingSet::new(
            Array2::from_shape_simple_fn((100, 4), || rng.random_range(0.0f32..1.0)),
            (0..100).map(|i| i % 3).collect(),
        )
        .unwrap();
        let zero = TrainOptions {
            epochs: 0,
            batch_size: 32,
            masking: true,
        };
        let stats = train_task(&mut net, &mut opt, &data, &zero, &mut rng).unwrap();
        assert_eq!(stats.steps, 0);
        assert_eq!(net, before);
        let one = TrainOptions { epochs: 1, ..zero };
        let stats = train_task(&mut net, &mut opt, &data, &one, &mut rng).unwrap();
        assert_eq!(stats.steps, 4);
        assert_eq!(stats.samples, 100);
    }

    #[test]
    fn width_scales_parameter_count() {
        let counts: Vec<usize> = ALLOWED_WIDTHS
            .iter()
            .map(|&k| {
                Network::<f32>::new(NetworkSpec::mlp(16, &[8], 5).with_width(k), 0)
                    .unwrap()
                    .param_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
        assert!(Network::<f32>::new(NetworkSpec::mlp(16, &[8], 5).with_width(3), 0).is_err());
        let cnn = Network::<f32>::new(NetworkSpec::cnn(10), 0).unwrap();
        let shapes: Vec<Vec<usize>> = cnn.params().into_iter().map(|p| p.shape).collect();
        assert_eq!(
            shapes,
            vec![
                vec![10, 1, 5, 5],
                vec![10],
                vec![20, 10, 5, 5],
                vec![20],
                vec![50, 320],
                vec![50],
                vec![10, 50],
                vec![10]
            ]
        );
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = Network::<f32>::new(NetworkSpec::mlp(5, &[4], 3).with_width(2), 9).unwrap();
        let ck = net.checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let restored = Network::<f32>::from_checkpoint(net.spec().clone(), &back).unwrap();
        assert_eq!(restored, net);
        assert!(Network::<f32>::from_checkpoint(NetworkSpec::mlp(5, &[3], 3), &ck).is_err());
    }

    #[test]
    fn evaluation_identity() {
        let net = Network::<f64>::new(NetworkSpec::mlp(3, &[4], 3), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<usize> = (0..50).map(|i| [0, 0, 1, 2, 2, 2][i % 6]).collect();
        let ds = LabeledDataset::new(
            Array2::from_shape_simple_fn((50, 3), || rng.random_range(0.0..1.0)),
            labels,
            3,
            crate::datasets::Split::Test,
        )
        .unwrap();
        let ev = evaluate(&net, &ds).unwrap();
        let weighted: f64 = ev
            .per_class
            .iter()
            .zip(&ev.counts)
            .map(|(a, &k)| a * k as f64)
            .sum::<f64>()
            / 50.0;
        assert!((weighted - ev.overall).abs() < 1e-15);
    }
}
