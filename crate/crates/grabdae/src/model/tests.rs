use super::*;
use crate::nn::ops;
use crate::rng::stream;
use rand::Rng;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        image_side: 8,
        num_classes: 3,
        conv1_filters: 4,
        conv2_filters: 6,
        kernel: 3,
        feature_dim: 10,
        disc_hidden: 8,
        dropout: 0.5,
    }
}

fn spec_v0() -> CorruptionSpec {
    CorruptionSpec { v_min: 0.0, v_max: 0.0, noise_sigma: 1.0 }
}

fn random_batch(n: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "batch", 0);
    let data: Vec<f32> = (0..n * 3 * side * side).map(|_| rng.random_range(-0.5..0.5)).collect();
    Tensor::new(vec![n, 3, side, side], data).unwrap()
}

#[test]
fn zero_batch_gives_finite_features_with_expected_extent() {
    let mut rng = stream(1, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let mut tape = Tape::new();
    let bound = bind_frozen_classifier(&mut tape, &m);
    let x = tape.input(vec![2, 3, 8, 8], vec![0.0; 2 * 3 * 64]);
    let f = extract_features(&mut tape, &bound, x).unwrap();
    assert_eq!(tape.shape(f), &[2, 10]);
    assert!(tape.value(f).iter().all(|v| v.is_finite()));
}

#[test]
fn duplicated_image_gives_identical_rows() {
    let mut rng = stream(2, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let one = random_batch(1, 8, 3);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let batch = Tensor::new(vec![2, 3, 8, 8], data).unwrap();

    let mut tape = Tape::new();
    let bound = bind_frozen_classifier(&mut tape, &m);
    let x = tape.input_tensor(&batch);
    let f = extract_features(&mut tape, &bound, x).unwrap();
    let vals = tape.value(f);
    for i in 0..10 {
        assert_eq!(vals[i].to_bits(), vals[10 + i].to_bits());
    }
}

#[test]
fn classify_inference_is_deterministic() {
    let mut rng = stream(3, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let bound = bind_frozen_classifier(&mut tape, &m);
        let f = tape.input(vec![2, 10], (0..20).map(|v| v as f32 * 0.1).collect());
        let mut drop_rng = stream(99, "drop", 0);
        let logits = classify(&mut tape, &bound, f, false, &mut drop_rng).unwrap();
        tape.value(logits).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn classify_zero_weights_exposes_bias() {
    let mut rng = stream(4, "model", 0);
    let mut m = StudentModel::init(ModelConfig { num_classes: 2, ..small_cfg() }, &mut rng).unwrap();
    m.cls_w = Tensor::zeros(vec![10, 2]).with_grad();
    m.cls_b = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let bound = bind_frozen_classifier(&mut tape, &m);
    let f = tape.input(vec![3, 10], (0..30).map(|v| v as f32).collect());
    let mut drop_rng = stream(98, "drop", 0);
    let logits = classify(&mut tape, &bound, f, false, &mut drop_rng).unwrap();
    for row in 0..3 {
        assert_eq!(&tape.value(logits)[row * 2..row * 2 + 2], &[1.0, 0.0]);
    }
}

#[test]
fn argmax_on_random_features_is_non_degenerate() {
    let mut rng = stream(5, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let mut counts = vec![0usize; 3];
    let mut tape = Tape::new();
    let bound = bind_frozen_classifier(&mut tape, &m);
    let mut frng = stream(5, "feat", 0);
    let data: Vec<f32> = (0..1000 * 10).map(|_| frng.random_range(-1.0..1.0)).collect();
    let f = tape.input(vec![1000, 10], data);
    let mut drop_rng = stream(97, "drop", 0);
    let logits = classify(&mut tape, &bound, f, false, &mut drop_rng).unwrap();
    for label in argmax_rows(tape.value(logits), 1000, 3) {
        counts[label] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        assert!(c < 900, "class {k} claimed {c}/1000 rows");
    }
}

#[test]
fn discriminator_logits_finite_and_lambda_zero_blocks_gradient() {
    let mut rng = stream(6, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();

    let extractor_grad = |grl_lambda: f32| -> Vec<f32> {
        let mut tape = Tape::new();
        let bound = bind_student_classifier(&mut tape, &m).unwrap();
        let disc = bind_student_discriminator(&mut tape, &m).unwrap();
        let x = tape.input_tensor(&random_batch(2, 8, 7));
        let feats = extract_features(&mut tape, &bound, x).unwrap();
        let mut drop_rng = stream(96, "drop", 0);
        let logits = classify(&mut tape, &bound, feats, false, &mut drop_rng).unwrap();
        let probs = ops::softmax(&mut tape, logits).unwrap();
        let cond = condition_features(&mut tape, feats, probs).unwrap();
        let dlogits = discriminate(&mut tape, &disc, cond, grl_lambda).unwrap();
        assert!(tape.value(dlogits).iter().all(|v| v.is_finite()));
        let loss = ops::softmax_cross_entropy(&mut tape, dlogits, &[1, 0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.get("g.conv1.w").unwrap().to_vec()
    };

    let g0 = extractor_grad(0.0);
    assert!(g0.iter().all(|&g| g == 0.0), "λ=0 must stop gradients into g");

    let gp = extractor_grad(1.0);
    let gn = extractor_grad(-1.0);
    assert!(gp.iter().any(|&g| g != 0.0));
    for (a, b) in gp.iter().zip(&gn) {
        assert_eq!(*a, -*b, "flipping λ must flip the extractor gradient exactly");
    }
}

#[test]
fn student_forward_recon_loss_non_negative_and_reproducible() {
    let mut rng = stream(7, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let batch = random_batch(3, 8, 11);
    let spec = CorruptionSpec { v_min: 0.2, v_max: 0.6, noise_sigma: 1.0 };
    let run = || {
        let mut tape = Tape::new();
        let mut drop = stream(7, "drop", 1);
        let mut corr = stream(7, "corrupt", 1);
        let out =
            student_forward(&mut tape, &m, &batch, true, true, &spec, &mut drop, &mut corr).unwrap();
        (
            tape.scalar_value(out.recon_loss.unwrap()),
            tape.value(out.logits_orig).to_vec(),
            tape.value(out.logits_recon.unwrap()).to_vec(),
        )
    };
    let (l1, lo1, lr1) = run();
    let (l2, lo2, lr2) = run();
    assert!(l1 >= 0.0);
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(lo1, lo2);
    assert_eq!(lr1, lr2);
}

#[test]
fn perfect_reconstruction_point_makes_both_paths_agree() {
    // Identity DAE (h = d, unit weights, zero bias) over non-negative
    // features reconstructs bit-exactly, so the shared classifier sees the
    // same input on both paths.
    let cfg = small_cfg();
    let mut rng = stream(8, "model", 0);
    let mut m = StudentModel::init(cfg.clone(), &mut rng).unwrap();
    let d = cfg.feature_dim;
    let mut eye = vec![0.0f32; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    m.dae = crate::dae::DaeParams {
        enc_w: Tensor::new(vec![d, d], eye.clone()).unwrap().with_grad(),
        enc_b: Tensor::zeros(vec![d]).with_grad(),
        dec_w: Tensor::new(vec![d, d], eye).unwrap().with_grad(),
        dec_b: Tensor::zeros(vec![d]).with_grad(),
    };
    // push features into the non-negative region
    m.fc_b = Tensor::new(vec![d], vec![10.0; d]).unwrap().with_grad();

    let batch = random_batch(2, 8, 13);
    let mut tape = Tape::new();
    let mut drop = stream(8, "drop", 0);
    let mut corr = stream(8, "corrupt", 0);
    let out =
        student_forward(&mut tape, &m, &batch, false, true, &spec_v0(), &mut drop, &mut corr)
            .unwrap();
    let feats = tape.value(out.features).to_vec();
    let recon = tape.value(out.recon_features.unwrap()).to_vec();
    for (a, b) in feats.iter().zip(&recon) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(tape.scalar_value(out.recon_loss.unwrap()), 0.0);
    assert_eq!(tape.value(out.logits_orig), tape.value(out.logits_recon.unwrap()));
}

#[test]
fn disabling_dae_branch_leaves_orig_gradients_unchanged() {
    let mut rng = stream(9, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let batch = random_batch(2, 8, 17);
    let spec = CorruptionSpec { v_min: 0.3, v_max: 0.3, noise_sigma: 1.0 };

    let orig_grads = |with_dae: bool| {
        let mut tape = Tape::new();
        let mut drop = stream(9, "drop", 2);
        let mut corr = stream(9, "corrupt", 2);
        let out =
            student_forward(&mut tape, &m, &batch, true, with_dae, &spec, &mut drop, &mut corr)
                .unwrap();
        let loss = ops::softmax_cross_entropy(&mut tape, out.logits_orig, &[0, 1]).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.get("g.conv2.w").unwrap().to_vec()
    };
    let with_branch = orig_grads(true);
    let without_branch = orig_grads(false);
    for (a, b) in with_branch.iter().zip(&without_branch) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn pseudo_label_argmax_and_tie_break() {
    assert_eq!(argmax_rows(&[2.0, 1.0, 0.0], 1, 3), vec![0]);
    assert_eq!(argmax_rows(&[0.5, 0.5], 1, 2), vec![0]);
    assert_eq!(argmax_rows(&[0.1, 0.9, 0.9], 1, 3), vec![1]);
}

#[test]
fn pseudo_labels_invariant_under_positive_scaling_and_shift() {
    let mut rng = stream(10, "model", 0);
    for _ in 0..50 {
        let k = rng.random_range(2..6);
        let n = rng.random_range(1..5);
        let logits: Vec<f32> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scale: f32 = rng.random_range(0.01..100.0);
        let shift: f32 = rng.random_range(-10.0..10.0);
        let transformed: Vec<f32> = logits.iter().map(|&v| v * scale + shift).collect();
        assert_eq!(argmax_rows(&logits, n, k), argmax_rows(&transformed, n, k));
    }
}

#[test]
fn teacher_pass_registers_no_parameters() {
    let mut rng = stream(11, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let teacher = TeacherModel::from_student(&m);
    let batch = random_batch(2, 8, 19);
    // teacher_logits debug-asserts an empty param set internally
    let labels = teacher_pseudo_labels(&teacher, &batch).unwrap();
    assert_eq!(labels.len(), 2);
    assert!(labels.iter().all(|&l| l < 3));
}

#[test]
fn ema_endpoints_and_interpolation() {
    let mut rng = stream(12, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let mut teacher = TeacherModel::from_student(&m);

    // α = 1 → unchanged
    teacher.cls_w = Tensor::new(vec![10, 3], vec![1.0; 30]).unwrap();
    ema_update(&mut teacher, &m, 1.0).unwrap();
    assert!(teacher.cls_w.data().iter().all(|&v| v == 1.0));

    // α = 0 → teacher == student
    ema_update(&mut teacher, &m, 0.0).unwrap();
    assert_eq!(teacher.cls_w.data(), m.cls_w.data());

    // α = 0.9, t = 1, s = 0 → 0.9
    let mut teacher = TeacherModel::from_student(&m);
    teacher.cls_w = Tensor::new(vec![10, 3], vec![1.0; 30]).unwrap();
    let mut zero_student = m.clone();
    zero_student.cls_w = Tensor::zeros(vec![10, 3]).with_grad();
    ema_update(&mut teacher, &zero_student, 0.9).unwrap();
    for &v in teacher.cls_w.data() {
        assert!((v - 0.9).abs() < 1e-7);
    }
}

#[test]
fn ema_is_a_contraction_toward_the_student() {
    let mut rng = stream(13, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let mut teacher = TeacherModel::from_student(&m);
    // push the teacher away first
    for (_, t) in teacher.named_params_mut() {
        for v in t.data_mut() {
            *v += 0.5;
        }
    }
    let alpha = 0.7f32;
    let before: Vec<f32> = teacher
        .named_params()
        .iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .collect();
    let student_flat: Vec<f32> =
        m.named_params()[..8].iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    ema_update(&mut teacher, &m, alpha).unwrap();
    let after: Vec<f32> =
        teacher.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    for ((&b, &a), &s) in before.iter().zip(&after).zip(&student_flat) {
        let (lhs, rhs) = ((a - s).abs() as f64, alpha as f64 * (b - s).abs() as f64);
        assert!(lhs <= rhs * (1.0 + 1e-6) + 1e-12, "{lhs} vs {rhs}");
        // and the literal update formula
        let want = alpha * b + (1.0 - alpha) * s;
        assert_eq!(a.to_bits(), want.to_bits());
    }
}

#[test]
fn batch_tensor_centers_channels() {
    let img = Image::filled(8, 8, [1.0, 0.5, 0.0]);
    let t = batch_to_tensor(&[&img], 8).unwrap();
    assert_eq!(t.shape(), &[1, 3, 8, 8]);
    assert_eq!(t.data()[0], 0.5); // red plane
    assert_eq!(t.data()[64], 0.0); // green plane
    assert_eq!(t.data()[128], -0.5); // blue plane
}

#[test]
fn thresholded_pseudo_labels_gate_on_confidence() {
    let mut rng = stream(14, "model", 0);
    let m = StudentModel::init(small_cfg(), &mut rng).unwrap();
    let teacher = TeacherModel::from_student(&m);
    let batch = random_batch(4, 8, 23);
    let (labels, keep_all) = teacher_pseudo_labels_thresholded(&teacher, &batch, 0.0).unwrap();
    assert!(keep_all.iter().all(|&k| k));
    assert_eq!(labels, teacher_pseudo_labels(&teacher, &batch).unwrap());
    let (_, keep_none) = teacher_pseudo_labels_thresholded(&teacher, &batch, 1.1).unwrap();
    assert!(keep_none.iter().all(|&k| !k));
}
