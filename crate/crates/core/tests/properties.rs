//! Property tests for stream, replay, metric and learner invariants.

use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clstream::datasets::{
    apply_transform, encode_idx_images, make_blob_dataset, parse_idx_images, BlobParams, IdxImages, InputTransform,
};
use clstream::learner::{Network, NetworkSpec, Optimizer, OptimizerConfig, TrainBatch, TrainingSet, ALLOWED_WIDTHS};
use clstream::metrics::{
    band_report, bound_curves, local_forgetting_series, meta_test_probe, total_forgetting, MetricsLog, TaskRecord,
    DEFAULT_BAND_EDGES,
};
use clstream::replay::{renewal_count, FrequencyReplayConfig, ReplayBuffer};
use clstream::stream::{
    apply_gamma_penalty, build_mixture_probs, draw_without_replacement, ClassDistribution, Evolution, Sampler,
    ScenarioSpec, TaskStream,
};

const SAMPLES_PER_CLASS: usize = 10;

/// Class `c` owns sample ids `c*10 .. c*10+10`.
fn class_index(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|c| (c * SAMPLES_PER_CLASS..(c + 1) * SAMPLES_PER_CLASS).collect())
        .collect()
}

fn sampler_strategy() -> impl Strategy<Value = Sampler> {
    prop_oneof![
        Just(Sampler::Uniform),
        (0u32..4).prop_map(|d| Sampler::Mixture { entropy_decrease: d }),
        (0.0f64..=1.0).prop_map(|p| Sampler::Structured { flip_p: p }),
        (0.05f64..=1.0).prop_map(|f| Sampler::RestrictedPairs { fraction: f }),
        (prop::option::of(1usize..6)).prop_map(|r| Sampler::Distractor {
            interest_classes: None,
            revisit_period: r,
        }),
    ]
}

fn record(t: usize, accs: Vec<f64>, classes: Vec<usize>) -> TaskRecord {
    TaskRecord {
        t,
        overall_acc: accs.iter().sum::<f64>() / accs.len() as f64,
        per_class_acc: accs,
        classes_in_task: classes,
        gradient_steps: t as u64,
        replayed_classes: Vec::new(),
        cumulative_samples: t as u64,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixture_probabilities_form_a_distribution(n in 2usize..60, d in 0u32..5, seed: u64) {
        let dist = build_mixture_probs(n, d, seed).unwrap();
        let p = dist.probs();
        prop_assert_eq!(p.len(), n);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn draws_are_sorted_distinct_and_supported(
        weights in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], 2..30),
        k in 1usize..6,
        seed: u64,
    ) {
        let positive = weights.iter().filter(|&&w| w > 0.0).count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match draw_without_replacement(&weights, k, &mut rng) {
            Ok(draw) => {
                prop_assert!(k <= positive);
                prop_assert_eq!(draw.len(), k);
                prop_assert!(draw.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(draw.iter().all(|&c| weights[c] > 0.0));
            }
            Err(_) => prop_assert!(k > positive),
        }
    }

    #[test]
    fn gamma_penalty_keeps_the_zero_set(
        raw in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], 3..20),
        pick in prop::collection::btree_set(0usize..20, 1..4),
        gamma in 1.0f64..10.0,
    ) {
        prop_assume!(raw.iter().any(|&w| w > 0.0));
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let sampled: Vec<usize> = pick.into_iter().filter(|&c| c < probs.len()).collect();
        let zeros_before: Vec<bool> = probs.iter().map(|&p| p == 0.0).collect();
        if apply_gamma_penalty(&mut probs, &sampled, gamma).is_ok() {
            let zeros_after: Vec<bool> = probs.iter().map(|&p| p == 0.0).collect();
            prop_assert_eq!(zeros_before, zeros_after);
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn every_task_has_c_distinct_classes_and_consistent_samples(
        n in 4usize..12,
        c in 1usize..4,
        sampler in sampler_strategy(),
        seed: u64,
    ) {
        let spec = ScenarioSpec { sampler, ..ScenarioSpec::uniform(n, c, 30, seed) };
        prop_assume!(spec.validate().is_ok());
        let index = class_index(n);
        let mut stream = TaskStream::new(spec.clone(), 4).unwrap();
        let mut again = TaskStream::new(spec, 4).unwrap();
        for _ in 0..30 {
            let task = stream.next_task(&index).unwrap();
            prop_assert_eq!(&task, &again.next_task(&index).unwrap());
            let set: BTreeSet<usize> = task.classes.iter().copied().collect();
            prop_assert_eq!(set.len(), c);
            prop_assert!(set.iter().all(|&k| k < n));
            prop_assert!(!task.sample_ids.is_empty());
            prop_assert!(task.sample_ids.iter().all(|&i| set.contains(&(i / SAMPLES_PER_CLASS))));
        }
    }

    #[test]
    fn removal_zeroes_dropped_classes(n in 3usize..15, shift in 0usize..10, keep in prop::collection::btree_set(0usize..15, 1..5)) {
        let kept: Vec<usize> = keep.into_iter().filter(|&c| c < n).collect();
        prop_assume!(!kept.is_empty());
        let mut dist = ClassDistribution::uniform(n)
            .unwrap()
            .with_evolution(Evolution::Removal { shift_task: shift, kept: kept.clone() })
            .unwrap();
        dist.prepare(shift).unwrap();
        for (class, &p) in dist.probs().iter().enumerate() {
            prop_assert_eq!(p > 0.0, kept.contains(&class));
        }
    }

    #[test]
    fn substitution_periods_have_disjoint_support(n in 4usize..15, split in 1usize..14, shift in 1usize..10) {
        prop_assume!(split < n);
        let first: Vec<usize> = (0..split).collect();
        let second: Vec<usize> = (split..n).collect();
        let mut dist = ClassDistribution::uniform(n)
            .unwrap()
            .with_evolution(Evolution::Substitution { shift_task: shift, first, second })
            .unwrap();
        dist.prepare(shift - 1).unwrap();
        let before: BTreeSet<usize> = (0..n).filter(|&c| dist.probs()[c] > 0.0).collect();
        dist.prepare(shift).unwrap();
        let after: BTreeSet<usize> = (0..n).filter(|&c| dist.probs()[c] > 0.0).collect();
        prop_assert!(before.is_disjoint(&after));
        prop_assert_eq!(before.len() + after.len(), n);
    }

    #[test]
    fn permutation_preserves_rows_and_inverts(dim in 1usize..40, rows in 1usize..5, seed: u64) {
        let x = Array2::from_shape_fn((rows, dim), |(i, j)| (i * dim + j) as f64 / 200.0);
        let forward = InputTransform::pixel_permutation(dim, seed);
        let InputTransform::PixelPermutation { permutation, .. } = &forward else { unreachable!() };
        let mut inverse = vec![0; dim];
        for (j, &p) in permutation.iter().enumerate() {
            inverse[p] = j;
        }
        let y = apply_transform(x.view(), &forward).unwrap();
        for (a, b) in x.rows().into_iter().zip(y.rows()) {
            let mut a: Vec<f64> = a.to_vec();
            let mut b: Vec<f64> = b.to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
        let back = InputTransform::PixelPermutation { permutation: inverse, seed };
        prop_assert_eq!(apply_transform(y.view(), &back).unwrap(), x);
    }

    #[test]
    fn idx_header_roundtrip(count in 0usize..6, rows in 1usize..6, cols in 1usize..6, fill: u8) {
        let images = IdxImages { count, rows, cols, pixels: vec![fill; count * rows * cols] };
        let parsed = parse_idx_images(&encode_idx_images(&images)).unwrap();
        prop_assert_eq!((parsed.count, parsed.rows, parsed.cols), (count, rows, cols));
        prop_assert_eq!(parsed.pixels, images.pixels);
    }

    #[test]
    fn renewal_never_exceeds_capacity(n in 1usize..500, o in 1usize..1000) {
        let k = renewal_count(n, o).unwrap();
        prop_assert!(k >= 1 && k <= n);
    }

    #[test]
    fn replay_buffer_invariants(
        tasks in prop::collection::vec(prop::collection::btree_set(0usize..8, 1..4), 1..40),
        capacity in 1usize..12,
        tau in 0u64..3,
        seed: u64,
    ) {
        let mut cfg = FrequencyReplayConfig::new(0.05, 0.6, tau);
        cfg.capacity = capacity;
        let mut buf = ReplayBuffer::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        for (step, classes) in tasks.iter().enumerate() {
            let current: Vec<usize> = classes.iter().copied().collect();
            let before = buf.counts().clone();
            let selected = buf.select_replay_classes(&current);
            prop_assert_eq!(buf.nb_batch(), step as u64 + 1);
            for (class, count) in &before {
                prop_assert!(buf.counts()[class] >= *count);
            }
            for c in &selected {
                prop_assert!(seen.contains(c), "class {} replayed before it was ever seen", c);
                prop_assert!(!current.contains(c));
            }
            let labels: Vec<usize> = current.iter().flat_map(|&c| std::iter::repeat_n(c, 5)).collect();
            let inputs = Array2::from_shape_fn((labels.len(), 2), |(i, j)| (i + j) as f64);
            let task = TrainingSet::new(inputs, labels).unwrap();
            buf.observe_task(&task, &mut rng).unwrap();
            seen.extend(current);
            prop_assert!(buf.total_stored() <= capacity * seen.len());
        }
    }

    #[test]
    fn bound_curves_are_ordered(nu in 0.0f64..=1.0, t in 0u32..200, plateau in 0.0f64..=1.0) {
        let (lower, upper) = bound_curves(nu, t, plateau).unwrap();
        prop_assert!(lower <= upper);
        if (nu == 0.0 || nu == 1.0) && t >= 1 {
            prop_assert_eq!(lower, upper);
        }
    }

    #[test]
    fn band_partition_is_exhaustive_and_exclusive(
        raw in prop::collection::vec(prop_oneof![Just(0.0), 0.001f64..1.0], 5..40),
        c in 1usize..4,
    ) {
        prop_assume!(raw.iter().filter(|&&w| w > 0.0).count() >= c);
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let n = probs.len();
        let mut log = MetricsLog::new();
        log.push(record(0, vec![0.5; n], vec![0])).unwrap();
        // Heavy classes can push a per-class factor outside [0, 1]; the
        // report must refuse those distributions rather than misfile them.
        let Ok(report) = band_report(&log, &probs, c, &DEFAULT_BAND_EDGES, (0, 1)) else {
            return Ok(());
        };
        let mut assigned: Vec<usize> = report.bands.iter().flat_map(|b| b.classes.clone()).collect();
        assigned.sort_unstable();
        let expected: Vec<usize> = (0..n).filter(|&k| probs[k] > 0.0).collect();
        prop_assert_eq!(assigned, expected);
    }

    #[test]
    fn total_forgetting_is_the_mean_of_local_values(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 6), 0usize..6, 0usize..6), 2..30),
    ) {
        let mut log = MetricsLog::new();
        for (t, (accs, a, b)) in rows.into_iter().enumerate() {
            let classes: Vec<usize> = BTreeSet::from([a, b]).into_iter().collect();
            log.push(record(t, accs, classes)).unwrap();
        }
        let defined: Vec<f64> = local_forgetting_series(&log).into_iter().flatten().collect();
        match total_forgetting(&log) {
            Ok(total) => {
                let mut sum = 0.0;
                for v in &defined {
                    sum += v;
                }
                prop_assert_eq!(total, sum / defined.len() as f64);
            }
            Err(_) => prop_assert!(defined.is_empty()),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn probe_leaves_the_live_model_untouched(seed: u64, hidden in 1usize..8) {
        let blobs = BlobParams::new(4, 12, 5, 3.0, seed);
        let (train, test) = make_blob_dataset::<f64>(&blobs).unwrap();
        let interest = [1, 3];
        let mut net = Network::<f64>::new(NetworkSpec::mlp(5, &[hidden], 4), seed).unwrap();
        let data = TrainingSet::from_classes(&train, &interest).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &net).unwrap();
        let batch = TrainBatch::new(data.inputs.clone(), data.labels.clone()).unwrap();
        let (_, grads) = net.loss_and_grads(&batch, true).unwrap();
        opt.step(&mut net, &grads).unwrap();
        let before = net.checkpoint();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recipe = OptimizerConfig::adam(0.01);
        meta_test_probe(&net, &recipe, &data, &interest, &test, 0.5, 4, true, &mut rng).unwrap();
        prop_assert_eq!(net.checkpoint(), before);
    }

    #[test]
    fn masked_sgd_never_moves_absent_head_rows(seed: u64, n in 3usize..8, dim in 1usize..6) {
        let mut net = Network::<f32>::new(NetworkSpec::mlp(dim, &[4], n), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let present = [0usize, n - 1];
        let inputs = Array2::from_shape_simple_fn((6, dim), || rand::Rng::random_range(&mut rng, 0.0f32..1.0));
        let targets = (0..6).map(|i| present[i % 2]).collect();
        let batch = TrainBatch::new(inputs, targets).unwrap();
        let before = net.clone();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5), &net).unwrap();
        let (_, grads) = net.loss_and_grads(&batch, true).unwrap();
        opt.step(&mut net, &grads).unwrap();
        let (old_w, new_w) = (before.head_weight(), net.head_weight());
        for class in (0..n).filter(|c| !present.contains(c)) {
            let old_row: Vec<u32> = old_w.row(class).iter().map(|x| x.to_bits()).collect();
            let new_row: Vec<u32> = new_w.row(class).iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(old_row, new_row);
            prop_assert_eq!(before.head_bias()[class].to_bits(), net.head_bias()[class].to_bits());
        }
    }
}

#[test]
fn parameter_count_strictly_increases_with_width() {
    for spec in [NetworkSpec::mlp(20, &[16], 10), NetworkSpec::cnn(10)] {
        let counts: Vec<usize> = ALLOWED_WIDTHS
            .iter()
            .map(|&k| {
                Network::<f32>::new(spec.clone().with_width(k), 0)
                    .unwrap()
                    .param_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }
}
