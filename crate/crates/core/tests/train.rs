use plate_core::dataset::{DataRoots, Record};
use plate_core::synth::{generate, SynthSpec};
use plate_core::train::{
    accuracy, cross_entropy, extract_features, loss_and_gradient, train_head, Adam, FeatureCache, TrainConfig,
};
use plate_core::{Head, Matrix, Model, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian blobs: class `c` centred on a random unit-ish mean.
fn blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> (Matrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let noise = Normal::new(0.0, spread).unwrap();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        data.extend(means[c].iter().map(|m| m + noise.sample(&mut rng)));
        labels.push(c);
    }
    (Matrix::from_vec(classes * per_class, dim, data).unwrap(), labels)
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let (x, y) = blobs(3, 2, 6, 0.5, 1);
    let rows: Vec<usize> = (0..5).collect();
    let mut head = Head::<f64>::init(3, 6, 4);
    head.bias = vec![0.1, -0.2, 0.05];
    let (loss, g) = loss_and_gradient(&head, &x, &y, &rows).unwrap();
    assert!((loss - cross_entropy(&head, &x, &y, &rows)).abs() < 1e-12);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let n = head.weights.data().len();
    for p in 0..n + 3 {
        let bump = |d: f64| {
            let mut hh = head.clone();
            if p < n {
                hh.weights.data_mut()[p] += d;
            } else {
                hh.bias[p - n] += d;
            }
            cross_entropy(&hh, &x, &y, &rows)
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        let analytic = if p < n { g.weights.data()[p] } else { g.bias[p - n] };
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn adam_is_inert_without_step_size_or_gradient() {
    let start = vec![0.5f64, -1.25, 3.0];
    let mut p = start.clone();
    let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
    adam.step(&mut p, &[0.3, -0.1, 2.0], 0.0);
    assert_eq!(p, start);
    let mut q = start.clone();
    let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
    for _ in 0..5 {
        adam.step(&mut q, &[0.0; 3], 1e-3);
    }
    assert_eq!(q, start);
}

#[test]
fn adam_first_step_moves_by_lr() {
    // with bias correction the first update is lr * g / (|g| + eps)
    let mut p = vec![1.0f64, 1.0];
    let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
    adam.step(&mut p, &[4.0, -0.5], 0.01);
    assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] - 1.01).abs() < 1e-9, "{p:?}");
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        patience: 0,
        head_lr: 1e-2,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_two_class_problem_is_learned() {
    let (x, y) = blobs(2, 100, 16, 0.2, 2);
    let out = train_head(&x, &y, 2, &config(3)).unwrap();
    assert!(out.epoch_losses.len() <= 50);
    assert!(accuracy(&out.head, &x, &y) >= 0.99);
}

#[test]
fn twenty_three_classes_converge_monotonically() {
    let (x, y) = blobs(23, 100, 32, 0.1, 5);
    let cfg = TrainConfig {
        epochs: 50,
        patience: 0,
        seed: 8,
        ..TrainConfig::default()
    };
    let out = train_head(&x.cast::<f32>(), &y, 23, &cfg).unwrap();
    assert!(accuracy(&out.head, &x.cast::<f32>(), &y) >= 0.99);
    for w in out.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "loss rose {} -> {}", w[0], w[1]);
    }
}

#[test]
fn training_is_reproducible_and_seeded() {
    let (x, y) = blobs(4, 20, 8, 0.3, 6);
    let a = train_head(&x, &y, 4, &config(1)).unwrap();
    let b = train_head(&x, &y, 4, &config(1)).unwrap();
    let c = train_head(&x, &y, 4, &config(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.head, c.head);
}

#[test]
fn early_stopping_and_bad_inputs() {
    let (x, y) = blobs(2, 20, 4, 0.05, 7);
    let cfg = TrainConfig {
        epochs: 500,
        patience: 3,
        min_improvement: 1e-3,
        head_lr: 5e-2,
        ..TrainConfig::default()
    };
    let out = train_head(&x, &y, 2, &cfg).unwrap();
    assert!(out.stopped_early && out.epoch_losses.len() < 500);
    assert!(train_head(&x, &y, 1, &cfg).is_err(), "label 1 with a single class");
    assert!(train_head(&x, &y[..3], 2, &cfg).is_err());
    let huge = Matrix::from_vec(2, 1, vec![f64::INFINITY, 1.0]).unwrap();
    assert!(train_head(&huge, &[0, 1], 2, &cfg).is_err());
}

fn small_model() -> Model {
    let labels = vec!["a".to_string(), "b".to_string()];
    Model::build(ModelSpec::mobilenet_v2(2).with_resolution(32), labels, 11).unwrap()
}

fn records(dir: &std::path::Path) -> Vec<Record> {
    generate(dir, &SynthSpec::distinct(&[("a", 5), ("b", 4)], 20, 3)).unwrap();
    let scan = plate_core::dataset::scan_corpus(dir, &plate_core::dataset::Consolidation::identity()).unwrap();
    scan.manifest.records
}

#[test]
fn feature_extraction_is_deterministic_and_batch_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(dir.path());
    let refs: Vec<&Record> = recs.iter().collect();
    let model = small_model();
    let roots = DataRoots::new(dir.path());
    let labels = model.labels().to_vec();
    let (a, ra) = extract_features(&model, &refs, &roots, &labels, None).unwrap();
    let (b, _) = extract_features(&model, &refs, &roots, &labels, None).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.len(), a.dim()), (9, 1280));
    assert_eq!((ra.computed, ra.reused), (9, 0));
    assert_eq!(a.label_indices(), vec![0, 0, 0, 0, 0, 1, 1, 1, 1]);
    for (i, r) in refs.iter().enumerate() {
        let (one, _) = extract_features(&model, &[*r], &roots, &labels, None).unwrap();
        let diff = one.features.row(0).iter().zip(a.features.row(i)).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "row {i} differs by {diff}");
    }
}

#[test]
fn cache_reuse_round_trip_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(dir.path());
    let refs: Vec<&Record> = recs.iter().collect();
    let model = small_model();
    let roots = DataRoots::new(dir.path());
    let labels = model.labels().to_vec();
    let (first, _) = extract_features(&model, &refs, &roots, &labels, None).unwrap();

    let file = dir.path().join("f.plf");
    first.save(&file).unwrap();
    let loaded = FeatureCache::load(&file).unwrap();
    assert_eq!(loaded, first);
    assert_eq!(loaded.to_bytes(), first.to_bytes());

    let (again, report) = extract_features(&model, &refs, &roots, &labels, Some(&loaded)).unwrap();
    assert_eq!((report.computed, report.reused), (0, 9));
    assert_eq!(again, first);

    // a different backbone must not borrow rows
    let other = Model::build(ModelSpec::mobilenet_v2(2).with_resolution(32), labels.clone(), 12).unwrap();
    let (_, r) = extract_features(&other, &refs[..2], &roots, &labels, Some(&loaded)).unwrap();
    assert_eq!(r.reused, 0);

    std::fs::write(roots.resolve(refs[1]), b"garbage").unwrap();
    let (partial, r) = extract_features(&model, &refs, &roots, &labels, None).unwrap();
    assert_eq!(partial.len(), 8);
    assert_eq!(r.failed.len(), 1);
    assert_eq!(r.failed[0].0, refs[1].path);

    let bad = Record::original("a/x.png", "zz", "zz");
    assert!(extract_features(&model, &[&bad], &roots, &labels, None).is_err());
}
