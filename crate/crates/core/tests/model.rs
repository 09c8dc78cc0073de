use plate_core::container::ContainerError;
use plate_core::model::reference::{count_parameters, resnet50_layout, synthesized_file_size};
use plate_core::model::{
    placeholder_labels, BottleneckSpec, FreezePolicy, Model, ModelError, ModelSpec, ParamKind, MODEL_KIND,
};
use plate_core::ops::{batch_norm, conv2d, relu6};
use plate_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-layer count written out from the block table by hand, independent of
/// `ModelSpec::param_layout`.
fn closed_form_count(num_classes: usize) -> usize {
    let table = [(1, 16, 1), (6, 24, 2), (6, 32, 3), (6, 64, 4), (6, 96, 3), (6, 160, 3), (6, 320, 1)];
    // conv weights + bn gamma/beta
    let conv_bn = |cout: usize, cin_per_group: usize, k: usize| cout * cin_per_group * k * k + 2 * cout;
    let mut total = conv_bn(32, 3, 3);
    let mut cin = 32;
    for (t, c, n) in table {
        for _ in 0..n {
            let hidden = cin * t;
            if t != 1 {
                total += conv_bn(hidden, cin, 1);
            }
            total += conv_bn(hidden, 1, 3);
            total += conv_bn(c, hidden, 1);
            cin = c;
        }
    }
    total += conv_bn(1280, 320, 1);
    total + 1280 * num_classes + num_classes
}

#[test]
fn parameter_count_matches_closed_form() {
    let spec = ModelSpec::mobilenet_v2(1000);
    let counts = spec.parameter_counts(FreezePolicy { frozen_block_count: 0 }).unwrap();
    assert_eq!(counts.total, closed_form_count(1000));
    assert_eq!(counts.total, 3_504_872);
    assert_eq!(counts.trainable, counts.total);
}

#[test]
fn all_frozen_leaves_only_the_head() {
    let spec = ModelSpec::mobilenet_v2(23);
    let counts = spec.parameter_counts(FreezePolicy::all(&spec)).unwrap();
    assert_eq!(counts.trainable, 23 * 1280 + 23);
    assert_eq!(counts.total, closed_form_count(23));
    let over = FreezePolicy {
        frozen_block_count: spec.backbone_stages() + 1,
    };
    assert!(matches!(spec.parameter_counts(over), Err(ModelError::InvalidFreeze { .. })));
}

#[test]
fn first_ten_frozen_sits_between_the_extremes() {
    let spec = ModelSpec::mobilenet_v2(23);
    let ten = spec.parameter_counts(FreezePolicy::FIRST_TEN).unwrap();
    let all = spec.parameter_counts(FreezePolicy::all(&spec)).unwrap();
    assert!(ten.trainable > all.trainable && ten.trainable < ten.total);
}

#[test]
fn head_shape_for_23_classes() {
    let layout = ModelSpec::mobilenet_v2(23).param_layout();
    let w = layout.iter().find(|s| s.name == "classifier.weight").unwrap();
    assert_eq!(w.shape, vec![23, 1280]);
    assert_eq!(ModelSpec::mobilenet_v2(23).backbone_stages(), 19);
}

#[test]
fn invalid_spec_names_the_block() {
    let mut spec = ModelSpec::mobilenet_v2(10);
    spec.bottlenecks[3].stride = 3;
    match spec.validate() {
        Err(ModelError::InvalidSpec { block: Some(3), .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    let mut spec = ModelSpec::mobilenet_v2(10);
    spec.bottlenecks[0].expansion = 0;
    assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec { block: Some(0), .. })));
}

#[test]
fn residuals_exactly_where_shapes_agree() {
    for b in ModelSpec::mobilenet_v2(5).blocks() {
        assert_eq!(b.residual, b.stride == 1 && b.in_channels == b.out_channels);
    }
}

// Miniature network with hand-set weights, checked against a direct f64
// evaluation that knows nothing about folding or the stage table.

fn mini_spec() -> ModelSpec {
    ModelSpec {
        stem_channels: 2,
        bottlenecks: vec![BottleneckSpec::new(1, 2, 1, 1), BottleneckSpec::new(2, 3, 2, 1)],
        head_width: 4,
        input_resolution: 4,
        num_classes: 3,
    }
}

fn hand_params(spec: &ModelSpec) -> Vec<Vec<f32>> {
    spec.param_layout()
        .iter()
        .enumerate()
        .map(|(k, slot)| {
            (0..slot.elements())
                .map(|i| {
                    let v = ((i * 7 + k * 3) % 11) as f32 / 11.0 - 0.4;
                    if slot.name.ends_with("running_var") || slot.name.ends_with("bn.weight") {
                        0.75 + v.abs()
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect()
}

struct Oracle<'a> {
    params: &'a [Vec<f32>],
    next: usize,
    eps: f64,
}

type Act = Vec<Vec<Vec<f64>>>;

impl Oracle<'_> {
    fn take(&mut self) -> Vec<f64> {
        let p = self.params[self.next].iter().map(|&v| f64::from(v)).collect();
        self.next += 1;
        p
    }

    /// conv (no bias) + batch norm + optional relu6
    fn conv_bn(&mut self, x: &Act, cout: usize, k: usize, stride: usize, groups: usize, act: bool) -> Act {
        let w = self.take();
        let (g, b, m, v) = (self.take(), self.take(), self.take(), self.take());
        let cin = x.len();
        let (h, wd) = (x[0].len(), x[0][0].len());
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let mut y = vec![vec![vec![0.0; wo]; ho]; cout];
        for co in 0..cout {
            let grp = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wv = w[((co * cin_g + ci) * k + ky) * k + kx];
                                s += wv * x[grp * cin_g + ci][iy as usize][ix as usize];
                            }
                        }
                    }
                    let mut z = (s - m[co]) / (v[co] + self.eps).sqrt() * g[co] + b[co];
                    if act {
                        z = z.clamp(0.0, 6.0);
                    }
                    y[co][oy][ox] = z;
                }
            }
        }
        y
    }
}

fn mini_oracle_logits(params: &[Vec<f32>], eps: f64, image: &Act) -> Vec<f64> {
    let mut o = Oracle { params, next: 0, eps };
    let stem = o.conv_bn(image, 2, 3, 2, 1, true);
    // bottleneck 1: t=1, 2 -> 2, stride 1, residual
    let d = o.conv_bn(&stem, 2, 3, 1, 2, true);
    let p = o.conv_bn(&d, 2, 1, 1, 1, false);
    let b1: Act = (0..2)
        .map(|c| (0..2).map(|y| (0..2).map(|x| p[c][y][x] + stem[c][y][x]).collect()).collect())
        .collect();
    // bottleneck 2: t=2, 2 -> 3, stride 2
    let e = o.conv_bn(&b1, 4, 1, 1, 1, true);
    let d = o.conv_bn(&e, 4, 3, 2, 4, true);
    let b2 = o.conv_bn(&d, 3, 1, 1, 1, false);
    let last = o.conv_bn(&b2, 4, 1, 1, 1, true);
    let pooled: Vec<f64> = last
        .iter()
        .map(|plane| plane.iter().flatten().sum::<f64>() / (plane.len() * plane[0].len()) as f64)
        .collect();
    let fw = o.take();
    let fb = o.take();
    (0..3)
        .map(|j| fb[j] + (0..4).map(|i| fw[j * 4 + i] * pooled[i]).sum::<f64>())
        .collect()
}

#[test]
fn mini_model_matches_layer_by_layer_oracle() {
    let spec = mini_spec();
    let params = hand_params(&spec);
    let model = Model::from_params(spec, placeholder_labels(3), 1e-5, params.clone()).unwrap();
    let x = Tensor::<f32>::from_fn([1, 3, 4, 4], |[_, c, h, w]| ((c * 16 + h * 4 + w) % 9) as f32 / 4.0 - 1.0);
    let image: Act = (0..3)
        .map(|c| (0..4).map(|h| (0..4).map(|w| f64::from(x.get(0, c, h, w))).collect()).collect())
        .collect();
    let want = mini_oracle_logits(&params, 1e-5, &image);
    let got = model.logits(&x).unwrap();
    for (g, w) in got.row(0).iter().zip(&want) {
        assert!((f64::from(*g) - w).abs() < 1e-4, "{g} vs {w}");
    }
    let unfolded = model.logits_unfolded(&x).unwrap();
    for (g, w) in unfolded.row(0).iter().zip(&want) {
        assert!((f64::from(*g) - w).abs() < 1e-4, "{g} vs {w}");
    }
}

fn random_input(res: usize, n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 3, res, res], |_| rng.random_range(-2.0..2.0))
}

#[test]
fn folded_matches_unfolded_end_to_end_and_per_layer() {
    let model = Model::build(ModelSpec::mobilenet_v2(23).with_resolution(64), placeholder_labels(23), 3).unwrap();
    let x = random_input(64, 1, 4);
    let a = model.logits(&x).unwrap();
    let b = model.logits_unfolded(&x).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
    assert!(diff < 1e-3, "end-to-end {diff}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for layer in model.layers().unwrap() {
        let cin = layer.conv.in_channels();
        let input = Tensor::from_fn([1, cin, 9, 9], |_| rng.random_range(-1.0f32..1.0));
        let mut want = batch_norm(&conv2d(&input, &layer.conv).unwrap(), &layer.bn).unwrap();
        let mut got = conv2d(&input, &layer.folded).unwrap();
        if layer.relu6 {
            want = relu6(&want);
            got = relu6(&got);
        }
        let d = want.max_abs_diff(&got).unwrap();
        assert!(d < 1e-4, "{}: {d}", layer.name);
    }
}

fn small_model(classes: usize, seed: u64) -> Model {
    Model::build(ModelSpec::mobilenet_v2(classes).with_resolution(32), placeholder_labels(classes), seed).unwrap()
}

#[test]
fn save_load_save_is_byte_identical_and_forward_bitwise_equal() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(23, 1);
    let p1 = dir.path().join("a.plf");
    let p2 = dir.path().join("b.plf");
    let manifest = m.save(&p1).unwrap();
    assert_eq!(manifest.kind, MODEL_KIND);
    assert_eq!(manifest.metadata.labels.len(), 23);
    let loaded = Model::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let x = random_input(32, 2, 9);
    let a = m.probabilities(&x).unwrap();
    let b = loaded.probabilities(&x).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        assert!(ra.iter().zip(rb).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

/// Rewrites the JSON manifest of a weight file.
fn edit_manifest(bytes: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let mut v: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
    f(&mut v);
    let manifest = serde_json::to_vec(&v).unwrap();
    let mut out = b"PLF1".to_vec();
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&bytes[12 + len..]);
    out
}

#[test]
fn wrong_entry_shape_is_rejected_by_name() {
    let bytes = small_model(5, 2).to_bytes();
    let bad = edit_manifest(&bytes, |v| {
        v["entries"][7]["shape"] = serde_json::json!([1, 2, 3, 4]);
    });
    let name = small_model(5, 2).manifest().entries[7].name.clone();
    let err = Model::from_bytes(&bad).unwrap_err();
    assert!(err.to_string().contains(&name), "{err}");
    assert!(matches!(err, ModelError::Container(ContainerError::EntryShape { .. })));
}

#[test]
fn truncated_blob_is_rejected() {
    let bytes = small_model(5, 2).to_bytes();
    let err = Model::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
    let ModelError::Container(ContainerError::TruncatedEntry(name)) = &err else {
        panic!("unexpected {err:?}");
    };
    assert_eq!(name, "classifier.bias");
    assert!(err.to_string().contains("classifier.bias"));
}

#[test]
fn unknown_version_and_bad_magic_are_rejected() {
    let bytes = small_model(5, 2).to_bytes();
    let bad = edit_manifest(&bytes, |v| v["format_version"] = serde_json::json!(99));
    assert!(matches!(
        Model::from_bytes(&bad),
        Err(ModelError::Container(ContainerError::UnknownVersion(99)))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Model::from_bytes(&bad), Err(ModelError::Container(ContainerError::BadMagic))));
    assert!(Model::from_bytes(&bytes[..6]).is_err());
}

#[test]
fn top1_heads_top5_and_full_distribution_sums_to_one() {
    let m = small_model(23, 4);
    let x = random_input(32, 3, 1);
    let top5 = m.forward(&x, 5).unwrap();
    let top1 = m.forward(&x, 1).unwrap();
    let all = m.forward(&x, 23).unwrap();
    for ((a, b), c) in top1.iter().zip(&top5).zip(&all) {
        assert_eq!(a.top1().index, b.ranked[0].index);
        assert!(b.ranked.windows(2).all(|w| w[0].probability >= w[1].probability));
        let sum: f64 = c.ranked.iter().map(|s| f64::from(s.probability)).sum();
        assert!((sum - 1.0).abs() < 1e-6, "{sum}");
    }
}

#[test]
fn duplicated_image_gets_identical_predictions() {
    let m = small_model(7, 4);
    let one = random_input(32, 1, 2);
    let batch = Tensor::stack(&[one.clone(), one]).unwrap();
    let p = m.forward(&batch, 7).unwrap();
    assert_eq!(p[0].ranked, p[1].ranked);
}

#[test]
fn batch_equals_one_by_one() {
    let m = small_model(4, 8);
    let batch = random_input(32, 3, 6);
    let f = m.features(&batch).unwrap();
    for i in 0..3 {
        let single = m.features(&batch.item_tensor(i)).unwrap();
        for (a, b) in f.row(i).iter().zip(single.row(0)) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn replace_head_1000_to_23_keeps_backbone_hash() {
    let m = small_model(1000, 1);
    let r = m.replace_head(placeholder_labels(23), 7).unwrap();
    assert_eq!(r.backbone_digest(), m.backbone_digest());
    assert_eq!(r.head().num_classes(), 23);
    let p = r.probabilities(&random_input(32, 1, 3)).unwrap();
    assert_eq!(p[0].len(), 23);
    assert_eq!(r.head(), m.replace_head(placeholder_labels(23), 7).unwrap().head());
    let bound = 1.0 / (1280f32).sqrt();
    assert!(r.head().weights.data().iter().all(|w| w.abs() <= bound));
    assert!(r.head().bias.iter().all(|&b| b == 0.0));
}

#[test]
fn resnet50_file_is_at_least_eight_times_larger() {
    let mobilenet = Model::build(ModelSpec::mobilenet_v2(23), placeholder_labels(23), 0).unwrap();
    let small = mobilenet.to_bytes().len() as u64;
    let big = synthesized_file_size("resnet50", &resnet50_layout(23));
    assert!(big >= 8 * small, "{big} vs {small}");
    assert!(count_parameters(&resnet50_layout(1000)) > 7 * closed_form_count(1000));
    assert!(resnet50_layout(10).iter().any(|s| s.kind == ParamKind::Buffer));
}
